//! Skeleton graphs: joint templates, spatial partitioning, and adjacency
//! normalization.
//!
//! A template is an undirected joint graph plus a rest pose. Spatial
//! convolution splits the one-hop neighborhood of every joint into three
//! partitions by distance to the skeleton's center of gravity: the joint
//! itself, the neighbors strictly closer to the center (centripetal),
//! and the rest (centrifugal). Ties go to the centrifugal set. Each
//! partition matrix is degree-normalized symmetrically with a small
//! epsilon so empty rows stay finite.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// Epsilon added to vertex degrees before normalization.
pub const DEGREE_EPS: f64 = 1e-3;

/// Number of spatial partitions (self, centripetal, centrifugal).
pub const PARTITIONS: usize = 3;

/// An undirected skeleton graph with rest-pose coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonTemplate {
    num_joints: usize,
    edges: Vec<(usize, usize)>,
    rest_pose: Vec<[f64; 3]>,
    root: usize,
}

impl SkeletonTemplate {
    /// Validates and builds a template. Edges are undirected pairs of
    /// distinct joint indices; `root` anchors bone extraction.
    pub fn new(
        num_joints: usize,
        edges: Vec<(usize, usize)>,
        rest_pose: Vec<[f64; 3]>,
        root: usize,
    ) -> Result<Self> {
        if num_joints == 0 {
            return Err(Error::Config(String::from("template needs at least one joint")));
        }
        if rest_pose.len() != num_joints {
            return Err(Error::Config(format!(
                "template has {} joints but {} rest-pose rows",
                num_joints,
                rest_pose.len()
            )));
        }
        if root >= num_joints {
            return Err(Error::Config(format!(
                "root joint {root} out of range for {num_joints} joints"
            )));
        }
        for (k, &(i, j)) in edges.iter().enumerate() {
            if i >= num_joints || j >= num_joints {
                return Err(Error::Config(format!(
                    "edge {k} = ({i}, {j}) references a joint outside 0..{num_joints}"
                )));
            }
            if i == j {
                return Err(Error::Config(format!("edge {k} = ({i}, {j}) is a self-loop")));
            }
        }
        for pose in &rest_pose {
            if !pose.iter().all(|c| c.is_finite()) {
                return Err(Error::Config(String::from("rest pose contains a non-finite value")));
            }
        }
        Ok(Self { num_joints, edges, rest_pose, root })
    }

    pub fn num_joints(&self) -> usize {
        self.num_joints
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn rest_pose(&self) -> &[[f64; 3]] {
        &self.rest_pose
    }

    pub fn root(&self) -> usize {
        self.root
    }

    /// Mean of the rest-pose coordinates.
    pub fn center_of_gravity(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for p in &self.rest_pose {
            for (a, b) in c.iter_mut().zip(p) {
                *a += b;
            }
        }
        let n = self.num_joints as f64;
        [c[0] / n, c[1] / n, c[2] / n]
    }

    /// Euclidean distance of every joint to the center of gravity.
    pub fn gravity_distances(&self) -> Vec<f64> {
        let c = self.center_of_gravity();
        self.rest_pose
            .iter()
            .map(|p| math::hypot3(p[0] - c[0], p[1] - c[1], p[2] - c[2]))
            .collect()
    }

    /// Parent of every joint in the tree rooted at [`root`], or an error
    /// if the edge set is not a connected tree.
    ///
    /// [`root`]: SkeletonTemplate::root
    pub fn parent_map(&self) -> Result<Vec<Option<usize>>> {
        if self.edges.len() + 1 != self.num_joints {
            return Err(Error::Config(format!(
                "bone extraction needs a tree: {} joints require {} edges, template has {}",
                self.num_joints,
                self.num_joints - 1,
                self.edges.len()
            )));
        }
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); self.num_joints];
        for &(i, j) in &self.edges {
            adj[i].push(j);
            adj[j].push(i);
        }
        let mut parent = vec![None; self.num_joints];
        let mut seen = vec![false; self.num_joints];
        let mut queue = vec![self.root];
        seen[self.root] = true;
        let mut head = 0;
        while head < queue.len() {
            let u = queue[head];
            head += 1;
            for &w in &adj[u] {
                if !seen[w] {
                    seen[w] = true;
                    parent[w] = Some(u);
                    queue.push(w);
                }
            }
        }
        if queue.len() != self.num_joints {
            return Err(Error::Config(String::from(
                "bone extraction needs a connected skeleton, template has unreachable joints",
            )));
        }
        Ok(parent)
    }

    /// Parses the text template format: a header line `V E`, then `E`
    /// lines `i j` (zero-based undirected edges), then `V` lines `x y z`
    /// (rest pose). Blank lines and `#` comments are skipped. The root
    /// joint of a parsed template defaults to 0.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(n, l)| (n + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty());
        let (hn, header) = lines
            .next()
            .ok_or_else(|| Error::Config(String::from("template text is empty")))?;
        let mut it = header.split_whitespace();
        let v: usize = parse_field(it.next(), hn, "joint count")?;
        let e: usize = parse_field(it.next(), hn, "edge count")?;
        if it.next().is_some() {
            return Err(Error::Config(format!("line {hn}: header has trailing tokens")));
        }
        let mut edges = Vec::with_capacity(e);
        for k in 0..e {
            let (n, l) = lines
                .next()
                .ok_or_else(|| Error::Config(format!("expected {e} edge lines, found {k}")))?;
            let mut it = l.split_whitespace();
            let i: usize = parse_field(it.next(), n, "edge endpoint")?;
            let j: usize = parse_field(it.next(), n, "edge endpoint")?;
            if it.next().is_some() {
                return Err(Error::Config(format!("line {n}: edge line has trailing tokens")));
            }
            edges.push((i, j));
        }
        let mut rest = Vec::with_capacity(v);
        for k in 0..v {
            let (n, l) = lines
                .next()
                .ok_or_else(|| Error::Config(format!("expected {v} pose lines, found {k}")))?;
            let mut it = l.split_whitespace();
            let x: f64 = parse_field(it.next(), n, "coordinate")?;
            let y: f64 = parse_field(it.next(), n, "coordinate")?;
            let z: f64 = parse_field(it.next(), n, "coordinate")?;
            if it.next().is_some() {
                return Err(Error::Config(format!("line {n}: pose line has trailing tokens")));
            }
            rest.push([x, y, z]);
        }
        if let Some((n, _)) = lines.next() {
            return Err(Error::Config(format!("line {n}: unexpected content after template")));
        }
        Self::new(v, edges, rest, 0)
    }

    /// The 25-joint skeleton used by common depth-camera capture rigs,
    /// with an upright rest pose (arms out, z mostly zero) and the upper
    /// spine as bone root.
    pub fn builtin25() -> Self {
        const EDGES: [(usize, usize); 24] = [
            (0, 1),
            (1, 20),
            (2, 20),
            (3, 2),
            (4, 20),
            (5, 4),
            (6, 5),
            (7, 6),
            (8, 20),
            (9, 8),
            (10, 9),
            (11, 10),
            (12, 0),
            (13, 12),
            (14, 13),
            (15, 14),
            (16, 0),
            (17, 16),
            (18, 17),
            (19, 18),
            (21, 22),
            (22, 7),
            (23, 24),
            (24, 11),
        ];
        const REST: [[f64; 3]; 25] = [
            [0.0, 0.0, 0.0],      // 0: spine base
            [0.0, 0.25, 0.0],     // 1: spine mid
            [0.0, 0.62, 0.0],     // 2: neck
            [0.0, 0.78, 0.0],     // 3: head
            [-0.20, 0.50, 0.0],   // 4: left shoulder
            [-0.45, 0.50, 0.0],   // 5: left elbow
            [-0.70, 0.50, 0.0],   // 6: left wrist
            [-0.80, 0.50, 0.0],   // 7: left hand
            [0.20, 0.50, 0.0],    // 8: right shoulder
            [0.45, 0.50, 0.0],    // 9: right elbow
            [0.70, 0.50, 0.0],    // 10: right wrist
            [0.80, 0.50, 0.0],    // 11: right hand
            [-0.10, -0.05, 0.0],  // 12: left hip
            [-0.12, -0.50, 0.0],  // 13: left knee
            [-0.13, -0.95, 0.0],  // 14: left ankle
            [-0.14, -1.02, 0.12], // 15: left foot
            [0.10, -0.05, 0.0],   // 16: right hip
            [0.12, -0.50, 0.0],   // 17: right knee
            [0.13, -0.95, 0.0],   // 18: right ankle
            [0.14, -1.02, 0.12],  // 19: right foot
            [0.0, 0.50, 0.0],     // 20: upper spine
            [-0.88, 0.50, 0.0],   // 21: left hand tip
            [-0.80, 0.54, 0.06],  // 22: left thumb
            [0.88, 0.50, 0.0],    // 23: right hand tip
            [0.80, 0.54, 0.06],   // 24: right thumb
        ];
        Self::new(25, EDGES.to_vec(), REST.to_vec(), 20)
            .expect("builtin template is well formed")
    }
}

fn parse_field<T: core::str::FromStr>(tok: Option<&str>, line: usize, what: &str) -> Result<T> {
    let tok = tok.ok_or_else(|| Error::Config(format!("line {line}: missing {what}")))?;
    tok.parse()
        .map_err(|_| Error::Config(format!("line {line}: cannot parse {what} from {tok:?}")))
}

/// The three binary partition matrices and their normalized forms.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedAdjacency {
    /// Binary partition matrices: `a[0]` identity (self), `a[1]`
    /// centripetal, `a[2]` centrifugal. Entry `[i][j]` couples output
    /// joint `i` to input joint `j`.
    pub a: [Tensor; PARTITIONS],
    /// Degree-normalized partition matrices.
    pub a_hat: [Tensor; PARTITIONS],
    pub v: usize,
}

/// Splits a template's one-hop structure into the self, centripetal and
/// centrifugal partitions and normalizes each one.
///
/// For an edge between `i` and `j`: `j` lands in `i`'s centripetal set
/// when `j` is strictly closer to the center of gravity, otherwise
/// (including exact ties) in the centrifugal set.
pub fn build_partitions(template: &SkeletonTemplate) -> Result<PartitionedAdjacency> {
    let v = template.num_joints();
    let dist = template.gravity_distances();
    let a1 = Tensor::eye(v);
    let mut a2 = Tensor::zeros(&[v, v]);
    let mut a3 = Tensor::zeros(&[v, v]);
    for &(i, j) in template.edges() {
        for (from, to) in [(i, j), (j, i)] {
            if dist[to] < dist[from] {
                *a2.at_mut(&[from, to]) = 1.0;
            } else {
                *a3.at_mut(&[from, to]) = 1.0;
            }
        }
    }
    // Identity rows always have degree one; still run them through the
    // same normalization so every partition obeys one rule.
    let a_hat = [
        normalize(&a1, DEGREE_EPS)?,
        normalize(&a2, DEGREE_EPS)?,
        normalize(&a3, DEGREE_EPS)?,
    ];
    Ok(PartitionedAdjacency { a: [a1, a2, a3], a_hat, v })
}

/// Symmetric degree normalization with an epsilon floor:
/// `out[i][j] = a[i][j] / sqrt((d_i + eps) * (d_j + eps))` where `d_i`
/// is the row sum of `a`. Rows of zeros stay zero (and finite).
pub fn normalize(a: &Tensor, eps: f64) -> Result<Tensor> {
    if a.rank() != 2 || a.shape()[0] != a.shape()[1] {
        return Err(Error::Dim(format!(
            "normalize expects a square matrix, got {}",
            crate::error::fmt_shape(a.shape())
        )));
    }
    if eps <= 0.0 {
        return Err(Error::Config(format!("degree epsilon must be positive, got {eps}")));
    }
    let v = a.shape()[0];
    let mut inv_sqrt = vec![0.0; v];
    for i in 0..v {
        let mut d = 0.0;
        for j in 0..v {
            d += a.at(&[i, j]);
        }
        inv_sqrt[i] = 1.0 / math::sqrt(d + eps);
    }
    let mut out = Tensor::zeros(&[v, v]);
    for i in 0..v {
        for j in 0..v {
            *out.at_mut(&[i, j]) = a.at(&[i, j]) * inv_sqrt[i] * inv_sqrt[j];
        }
    }
    Ok(out)
}
