//! Finite boxes and tori of `Z^d`.
//!
//! Vertices are indexed row-major (last axis fastest), so the vertex index
//! order coincides with the lexicographic order of coordinates. Every edge
//! stores its endpoints as `(plus, minus)` with `plus` the lexicographically
//! smaller endpoint; this orientation never changes after construction.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    Box,
    Torus,
}

impl Boundary {
    fn name(self) -> &'static str {
        match self {
            Boundary::Box => "box",
            Boundary::Torus => "torus",
        }
    }
}

/// Serializable description of a lattice, e.g.
/// `{"d":2,"extents":[256,256],"boundary":"torus"}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GraphSpec {
    pub d: usize,
    pub extents: Vec<usize>,
    pub boundary: Boundary,
}

impl GraphSpec {
    pub fn build(&self) -> Result<LatticeGraph> {
        LatticeGraph::new(self.d, &self.extents, self.boundary)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    /// Lexicographically smaller endpoint (`e+`).
    pub plus: usize,
    /// Lexicographically larger endpoint (`e-`).
    pub minus: usize,
    pub axis: usize,
}

impl Edge {
    /// The endpoint opposite to `x`, assuming `x` is incident.
    #[inline]
    pub fn other(&self, x: usize) -> usize {
        if self.plus == x {
            self.minus
        } else {
            self.plus
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Incidence {
    pub neighbor: usize,
    pub edge: usize,
}

/// Immutable lattice graph with CSR adjacency.
#[derive(Debug, Clone)]
pub struct LatticeGraph {
    spec: GraphSpec,
    strides: Vec<usize>,
    num_vertices: usize,
    edges: Vec<Edge>,
    offsets: Vec<usize>,
    incidence: Vec<Incidence>,
}

/// Vertex set of a ball plus a flag telling whether the finite lattice
/// distorts it relative to the ball in `Z^d`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ball {
    pub center: usize,
    pub radius: usize,
    pub vertices: Vec<usize>,
    pub clipped: bool,
}

impl Ball {
    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VolumeRatio {
    /// `|B(x,n)| / n^d`
    pub upper: f64,
    /// `n^d / |B(x,n)|`
    pub lower: f64,
    pub volume: usize,
    pub clipped: bool,
}

impl VolumeRatio {
    pub fn holds(&self, c_reg: f64) -> bool {
        self.upper <= c_reg && self.lower <= c_reg
    }
}

/// Constants of the structural graph assumption. The radius thresholds are
/// supplied by the user, not derived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphConstants {
    pub c_deg: f64,
    pub c_reg: f64,
    pub c_s1: f64,
    pub d: usize,
    pub d_prime: usize,
    pub n1: usize,
    pub n2: usize,
}

impl GraphConstants {
    pub fn new(
        c_deg: f64,
        c_reg: f64,
        c_s1: f64,
        d: usize,
        d_prime: usize,
        n1: usize,
        n2: usize,
    ) -> Result<Self> {
        if !(c_deg >= 1.0) || !(c_reg > 0.0) || !(c_s1 > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "need C_deg >= 1, C_reg > 0, C_S1 > 0; got {c_deg}, {c_reg}, {c_s1}"
            )));
        }
        if d < 2 || d_prime < d {
            return Err(Error::InvalidParameter(format!(
                "need d' >= d >= 2; got d = {d}, d' = {d_prime}"
            )));
        }
        Ok(Self {
            c_deg,
            c_reg,
            c_s1,
            d,
            d_prime,
            n1,
            n2,
        })
    }

    /// Constants for `Z^d` itself: `d' = d`, thresholds 1.
    pub fn euclidean(graph: &LatticeGraph, c_reg: f64, c_s1: f64) -> Result<Self> {
        let d = graph.dim();
        Self::new(graph.max_degree() as f64, c_reg, c_s1, d, d, 1, 1)
    }
}

impl LatticeGraph {
    pub fn new(d: usize, extents: &[usize], boundary: Boundary) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidDimension(d));
        }
        if extents.len() != d {
            return Err(Error::ExtentCount {
                expected: d,
                got: extents.len(),
            });
        }
        let min = match boundary {
            Boundary::Box => 2,
            Boundary::Torus => 3,
        };
        for (axis, &extent) in extents.iter().enumerate() {
            if extent < min {
                return Err(Error::InvalidExtent {
                    axis,
                    extent,
                    min,
                    boundary: boundary.name(),
                });
            }
        }

        let mut strides = vec![1usize; d];
        for i in (0..d.saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * extents[i + 1];
        }
        let num_vertices: usize = extents.iter().product();

        let mut edges = Vec::with_capacity(num_vertices * d);
        let mut coords = vec![0usize; d];
        for v in 0..num_vertices {
            for axis in 0..d {
                let c = coords[axis];
                let w = if c + 1 < extents[axis] {
                    Some(v + strides[axis])
                } else if boundary == Boundary::Torus {
                    Some(v - c * strides[axis])
                } else {
                    None
                };
                if let Some(w) = w {
                    edges.push(Edge {
                        plus: v.min(w),
                        minus: v.max(w),
                        axis,
                    });
                }
            }
            // advance row-major counter
            for axis in (0..d).rev() {
                coords[axis] += 1;
                if coords[axis] < extents[axis] {
                    break;
                }
                coords[axis] = 0;
            }
        }

        let mut degree = vec![0usize; num_vertices];
        for e in &edges {
            degree[e.plus] += 1;
            degree[e.minus] += 1;
        }
        let mut offsets = Vec::with_capacity(num_vertices + 1);
        offsets.push(0);
        for &k in &degree {
            offsets.push(offsets.last().unwrap() + k);
        }
        let mut fill = offsets[..num_vertices].to_vec();
        let mut incidence = vec![
            Incidence {
                neighbor: 0,
                edge: 0
            };
            offsets[num_vertices]
        ];
        for (id, e) in edges.iter().enumerate() {
            incidence[fill[e.plus]] = Incidence {
                neighbor: e.minus,
                edge: id,
            };
            fill[e.plus] += 1;
            incidence[fill[e.minus]] = Incidence {
                neighbor: e.plus,
                edge: id,
            };
            fill[e.minus] += 1;
        }

        Ok(Self {
            spec: GraphSpec {
                d,
                extents: extents.to_vec(),
                boundary,
            },
            strides,
            num_vertices,
            edges,
            offsets,
            incidence,
        })
    }

    pub fn spec(&self) -> &GraphSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.d
    }

    pub fn extents(&self) -> &[usize] {
        &self.spec.extents
    }

    pub fn boundary(&self) -> Boundary {
        self.spec.boundary
    }

    pub fn num_vertices(&self) -> usize {
        self.num_vertices
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge(&self, e: usize) -> Result<&Edge> {
        self.edges.get(e).ok_or(Error::EdgeOutOfRange {
            edge: e,
            count: self.edges.len(),
        })
    }

    /// `C_deg = 2d`
    pub fn max_degree(&self) -> usize {
        2 * self.spec.d
    }

    #[inline]
    pub fn neighbors(&self, x: usize) -> &[Incidence] {
        &self.incidence[self.offsets[x]..self.offsets[x + 1]]
    }

    #[inline]
    pub fn degree(&self, x: usize) -> usize {
        self.offsets[x + 1] - self.offsets[x]
    }

    pub fn check_vertex(&self, x: usize) -> Result<()> {
        if x < self.num_vertices {
            Ok(())
        } else {
            Err(Error::VertexOutOfRange {
                vertex: x,
                count: self.num_vertices,
            })
        }
    }

    pub(crate) fn check_len(&self, what: &'static str, len: usize, expected: usize) -> Result<()> {
        if len == expected {
            Ok(())
        } else {
            Err(Error::LengthMismatch {
                what,
                expected,
                got: len,
            })
        }
    }

    pub(crate) fn check_vertex_fn(&self, what: &'static str, f: &[f64]) -> Result<()> {
        self.check_len(what, f.len(), self.num_vertices)
    }

    pub fn coords(&self, x: usize) -> Vec<usize> {
        self.strides
            .iter()
            .zip(&self.spec.extents)
            .map(|(&s, &n)| (x / s) % n)
            .collect()
    }

    pub fn index(&self, coords: &[usize]) -> Result<usize> {
        if coords.len() != self.spec.d
            || coords.iter().zip(&self.spec.extents).any(|(&c, &n)| c >= n)
        {
            return Err(Error::CoordinateOutOfRange {
                coord: coords.iter().map(|&c| c as i64).collect(),
            });
        }
        Ok(coords.iter().zip(&self.strides).map(|(c, s)| c * s).sum())
    }

    /// Vertex reached from `x` by one step `+e_axis`, wrapping on a torus.
    pub fn step_forward(&self, x: usize, axis: usize) -> Option<usize> {
        let s = self.strides[axis];
        let n = self.spec.extents[axis];
        let c = (x / s) % n;
        if c + 1 < n {
            Some(x + s)
        } else if self.spec.boundary == Boundary::Torus {
            Some(x - c * s)
        } else {
            None
        }
    }

    /// Edge joining `x` and `y`, if any.
    pub fn edge_between(&self, x: usize, y: usize) -> Option<usize> {
        self.neighbors(x)
            .iter()
            .find(|inc| inc.neighbor == y)
            .map(|inc| inc.edge)
    }

    /// Breadth-first graph distances from `x` to every vertex.
    pub fn bfs_distances(&self, x: usize) -> Result<Vec<usize>> {
        self.check_vertex(x)?;
        Ok(self.bfs_bounded(x, usize::MAX))
    }

    fn bfs_bounded(&self, x: usize, radius: usize) -> Vec<usize> {
        let mut dist = vec![usize::MAX; self.num_vertices];
        let mut queue = VecDeque::new();
        dist[x] = 0;
        queue.push_back(x);
        while let Some(v) = queue.pop_front() {
            let dv = dist[v];
            if dv == radius {
                continue;
            }
            for inc in self.neighbors(v) {
                if dist[inc.neighbor] == usize::MAX {
                    dist[inc.neighbor] = dv + 1;
                    queue.push_back(inc.neighbor);
                }
            }
        }
        dist
    }

    pub fn graph_distance(&self, x: usize, y: usize) -> Result<usize> {
        self.check_vertex(x)?;
        self.check_vertex(y)?;
        if x == y {
            return Ok(0);
        }
        let dist = self.bfs_bounded(x, usize::MAX);
        Ok(dist[y])
    }

    /// Whether the radius-`r` ball around `x` differs from the ball in `Z^d`:
    /// on a box it touches the boundary, on a torus it wraps onto itself.
    pub fn ball_clipped(&self, x: usize, r: usize) -> bool {
        let coords = self.coords(x);
        match self.spec.boundary {
            Boundary::Box => coords
                .iter()
                .zip(&self.spec.extents)
                .any(|(&c, &n)| c < r || c + r > n - 1),
            Boundary::Torus => self.spec.extents.iter().any(|&n| 2 * r + 1 > n),
        }
    }

    pub fn ball(&self, x: usize, r: usize) -> Result<Ball> {
        self.check_vertex(x)?;
        let dist = self.bfs_bounded(x, r);
        let vertices = dist
            .iter()
            .enumerate()
            .filter(|(_, &d)| d <= r)
            .map(|(v, _)| v)
            .collect();
        Ok(Ball {
            center: x,
            radius: r,
            vertices,
            clipped: self.ball_clipped(x, r),
        })
    }

    pub fn volume_regularity_ratio(&self, x: usize, n: usize) -> Result<VolumeRatio> {
        if n == 0 {
            return Err(Error::Precondition("radius n must be >= 1".into()));
        }
        let ball = self.ball(x, n)?;
        let vol = ball.len() as f64;
        let nd = (n as f64).powi(self.spec.d as i32);
        Ok(VolumeRatio {
            upper: vol / nd,
            lower: nd / vol,
            volume: ball.len(),
            clipped: ball.clipped,
        })
    }

    /// Ratio of the two sides of the local `(S^1_{d'})` Sobolev inequality for
    /// one test function `u` supported in `B(x,n)`.
    pub fn sobolev_ratio(&self, u: &[f64], x: usize, n: usize, d_prime: f64) -> Result<f64> {
        self.check_vertex_fn("test function", u)?;
        if n == 0 {
            return Err(Error::Precondition("radius n must be >= 1".into()));
        }
        let d = self.spec.d as f64;
        if !(d_prime >= d) {
            return Err(Error::InvalidParameter(format!(
                "d' = {d_prime} must be >= d = {d}"
            )));
        }
        let dist = self.bfs_bounded(x, n);
        let inside = |v: usize| dist[v] <= n;
        if let Some(v) = (0..u.len()).find(|&v| u[v] != 0.0 && !inside(v)) {
            return Err(Error::Precondition(format!(
                "support of u leaves B(x,{n}) at vertex {v}"
            )));
        }
        if u.iter().all(|&v| v == 0.0) {
            return Err(Error::ZeroFunction);
        }
        let q = d_prime / (d_prime - 1.0);
        let lhs = if q.is_finite() {
            u.iter()
                .enumerate()
                .filter(|&(v, _)| inside(v))
                .map(|(_, &val)| val.abs().powf(q))
                .sum::<f64>()
                .powf(1.0 / q)
        } else {
            // d' = 1 is excluded above (d' >= d >= 1), but keep the sup form
            u.iter().fold(0.0f64, |m, v| m.max(v.abs()))
        };
        let edge_sum: f64 = self
            .edges
            .iter()
            .filter(|e| inside(e.plus) || inside(e.minus))
            .map(|e| (u[e.plus] - u[e.minus]).abs())
            .sum();
        let scale = (n as f64).powf(1.0 - d / d_prime);
        Ok(lhs / (scale * edge_sum))
    }
}
