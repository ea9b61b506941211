//! Random small sheaves and clamps for property tests and benchmarks.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::gaussian_matrix;
use crate::relative::ClampSpec;
use crate::sheaf::{Edge, PCSheaf, Vertex};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RandomSheafSpec {
    pub min_vertices: usize,
    pub max_vertices: usize,
    pub max_dim: usize,
    /// Extra edges beyond a random spanning path, as a multiple of the vertex count.
    pub max_extra_edge_ratio: f64,
}

impl Default for RandomSheafSpec {
    fn default() -> Self {
        Self {
            min_vertices: 2,
            max_vertices: 8,
            max_dim: 4,
            max_extra_edge_ratio: 1.0,
        }
    }
}

/// Connected multigraph (a random path plus random extra edges, possibly
/// parallel) with random stalk dimensions and Gaussian restriction maps.
pub fn random_sheaf<R: Rng>(rng: &mut R, spec: &RandomSheafSpec) -> PCSheaf {
    let nv = rng.random_range(spec.min_vertices.max(1)..=spec.max_vertices.max(spec.min_vertices));
    let dims: Vec<usize> = (0..nv).map(|_| rng.random_range(1..=spec.max_dim.max(1))).collect();
    let names: Vec<String> = (0..nv).map(|i| format!("v{i}")).collect();
    let vertices = names.iter().zip(&dims).map(|(n, &d)| Vertex::new(n.as_str(), d)).collect();

    let mut order: Vec<usize> = (0..nv).collect();
    order.shuffle(rng);
    let mut pairs: Vec<(usize, usize)> = order.windows(2).map(|w| (w[0], w[1])).collect();
    let extra = (spec.max_extra_edge_ratio * nv as f64).floor() as usize;
    if nv > 1 {
        for _ in 0..rng.random_range(0..=extra) {
            let u = rng.random_range(0..nv);
            let mut v = rng.random_range(0..nv - 1);
            if v >= u {
                v += 1;
            }
            pairs.push((u, v));
        }
    }
    let edges = pairs
        .into_iter()
        .enumerate()
        .map(|(k, (u, v))| {
            let w = gaussian_matrix(rng, dims[v], dims[u]);
            Edge::new(format!("e{k}"), names[u].as_str(), names[v].as_str(), w)
        })
        .collect();
    PCSheaf::new(vertices, edges).expect("generated sheaf is valid")
}

/// Clamps a random nonempty proper subset of vertices to Gaussian values.
pub fn random_clamp<R: Rng>(rng: &mut R, sheaf: &PCSheaf) -> ClampSpec {
    let n = sheaf.num_vertices();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let k = if n > 1 { rng.random_range(1..n) } else { 0 };
    let mut spec = ClampSpec::new();
    for &i in &idx[..k] {
        let v = &sheaf.vertices()[i];
        spec.insert(v.id.clone(), gaussian_matrix(rng, v.dim, 1).column(0).into_owned());
    }
    spec
}

/// Feedforward chain `x -> h1 -> … -> y` of the given depth (edge count)
/// with Gaussian weights; returns the sheaf and a clamp of both ends.
pub fn random_chain<R: Rng>(rng: &mut R, depth: usize, max_dim: usize) -> (PCSheaf, ClampSpec) {
    let dims: Vec<usize> = (0..=depth).map(|_| rng.random_range(1..=max_dim)).collect();
    let weights: Vec<DMatrix<f64>> = (0..depth)
        .map(|i| gaussian_matrix(rng, dims[i + 1], dims[i]))
        .collect();
    let sheaf = crate::experiments::make_chain(&dims, weights).expect("conforming chain");
    let x: DVector<f64> = gaussian_matrix(rng, dims[0], 1).column(0).into_owned();
    let y: DVector<f64> = gaussian_matrix(rng, dims[depth], 1).column(0).into_owned();
    (sheaf, ClampSpec::new().with("x", x).with("y", y))
}
