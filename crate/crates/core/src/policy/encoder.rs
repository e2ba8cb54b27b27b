//! Node features and the graph encoder.
//!
//! Round `k` computes `h' = relu(W_self h + W_nbr mean(h over neighbours) + b)`,
//! so after `K` rounds a node's embedding depends only on its `K`-hop
//! neighbourhood. The flat encoder stops at the input projection.

use super::params::PolicyParams;
use crate::error::{Error, Result};
use crate::graph::Graph;

const EPS: f64 = 1e-12;

pub fn feature_width(g: &Graph) -> usize {
    g.op_types() + 4
}

/// `[one-hot op (T), compute, memory, in-degree, out-degree]`, each scalar
/// normalised by its graph-wide maximum.
pub fn node_features(g: &Graph, i: usize) -> Result<Vec<f64>> {
    if i >= g.len() {
        return Err(Error::Index { index: i, len: g.len() });
    }
    let max_compute = g.nodes().iter().map(|n| n.compute).fold(0.0, f64::max).max(EPS);
    let max_memory = g.nodes().iter().map(|n| n.memory).fold(0.0, f64::max).max(EPS);
    let max_degree = (0..g.len())
        .map(|k| g.in_degree(k).max(g.out_degree(k)))
        .max()
        .unwrap_or(0) as f64;
    let max_degree = max_degree.max(EPS);

    let node = g.node(i);
    let mut x = vec![0.0; feature_width(g)];
    x[node.op_type] = 1.0;
    let t = g.op_types();
    x[t] = node.compute / max_compute;
    x[t + 1] = node.memory / max_memory;
    x[t + 2] = g.in_degree(i) as f64 / max_degree;
    x[t + 3] = g.out_degree(i) as f64 / max_degree;
    Ok(x)
}

/// `y += W v` for a row-major `rows x v.len()` matrix.
fn matvec_acc(w: &[f64], v: &[f64], y: &mut [f64]) {
    let cols = v.len();
    for (r, out) in y.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        *out += row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `y += W^T dy`.
fn matvec_t_acc(w: &[f64], dy: &[f64], y: &mut [f64]) {
    let cols = y.len();
    for (r, &g) in dy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        for (out, a) in y.iter_mut().zip(row) {
            *out += a * g;
        }
    }
}

/// `W += dy ⊗ v`.
fn outer_acc(dw: &mut [f64], dy: &[f64], v: &[f64]) {
    let cols = v.len();
    for (r, &g) in dy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        for (out, x) in dw[r * cols..(r + 1) * cols].iter_mut().zip(v) {
            *out += g * x;
        }
    }
}

/// Forward activations of one graph under one parameter vector, kept for
/// the backward pass.
#[derive(Debug, Clone)]
pub struct Encoding {
    n: usize,
    d: usize,
    neighbors: Vec<Vec<usize>>,
    inputs: Vec<Vec<f64>>,
    /// `layers[k]` is the N x D activation entering round `k`; the last entry
    /// is the output.
    layers: Vec<Vec<f64>>,
    means: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Encoding {
    pub fn num_nodes(&self) -> usize {
        self.n
    }

    pub fn hidden(&self) -> usize {
        self.d
    }

    /// Final N x D embedding matrix, row-major.
    pub fn embeddings(&self) -> &[f64] {
        self.layers.last().expect("at least the input layer")
    }

    pub fn embedding(&self, i: usize) -> &[f64] {
        &self.embeddings()[i * self.d..(i + 1) * self.d]
    }

    /// Accumulates parameter gradients given `d_out`, the gradient of the
    /// objective with respect to the final embeddings.
    pub fn backward(&self, params: &PolicyParams, d_out: &[f64], grad: &mut [f64]) {
        let layout = params.layout();
        let (n, d) = (self.n, self.d);
        let w = &params.weights;
        let mut dh = d_out.to_vec();

        for k in (0..self.pre.len()).rev() {
            let w_self = &w[layout.w_self(k)];
            let w_nbr = &w[layout.w_nbr(k)];
            let h = &self.layers[k];
            let mut dprev = vec![0.0; n * d];
            let mut dpre = vec![0.0; d];
            let mut dm = vec![0.0; d];
            for i in 0..n {
                let rows = i * d..(i + 1) * d;
                for ((g, &up), &z) in dpre.iter_mut().zip(&dh[rows.clone()]).zip(&self.pre[k][rows.clone()]) {
                    *g = if z > 0.0 { up } else { 0.0 };
                }
                if dpre.iter().all(|&g| g == 0.0) {
                    continue;
                }
                outer_acc(&mut grad[layout.w_self(k)], &dpre, &h[rows.clone()]);
                outer_acc(&mut grad[layout.w_nbr(k)], &dpre, &self.means[k][rows.clone()]);
                for (b, g) in grad[layout.bias(k)].iter_mut().zip(&dpre) {
                    *b += g;
                }
                matvec_t_acc(w_self, &dpre, &mut dprev[rows]);
                let nbrs = &self.neighbors[i];
                if !nbrs.is_empty() {
                    dm.iter_mut().for_each(|v| *v = 0.0);
                    matvec_t_acc(w_nbr, &dpre, &mut dm);
                    let inv = 1.0 / nbrs.len() as f64;
                    for &j in nbrs {
                        for (t, g) in dprev[j * d..(j + 1) * d].iter_mut().zip(&dm) {
                            *t += g * inv;
                        }
                    }
                }
            }
            dh = dprev;
        }

        let gw_in = &mut grad[layout.w_in()];
        for i in 0..n {
            outer_acc(gw_in, &dh[i * d..(i + 1) * d], &self.inputs[i]);
        }
    }
}

pub(crate) fn check_dims(g: &Graph, params: &PolicyParams) -> Result<()> {
    let f = feature_width(g);
    if params.hyper.features != f {
        return Err(Error::Dimension(format!(
            "policy expects {} input features, graph with {} op types gives {f}",
            params.hyper.features,
            g.op_types()
        )));
    }
    if params.weights.len() != params.hyper.param_count() {
        return Err(Error::Dimension(format!(
            "weight vector has {} entries, hyper-parameters imply {}",
            params.weights.len(),
            params.hyper.param_count()
        )));
    }
    Ok(())
}

pub fn encode(g: &Graph, params: &PolicyParams) -> Result<Encoding> {
    check_dims(g, params)?;
    let layout = params.layout();
    let (n, d) = (g.len(), params.hyper.hidden);
    let w = &params.weights;
    let inputs: Vec<Vec<f64>> = (0..n).map(|i| node_features(g, i)).collect::<Result<_>>()?;
    let neighbors: Vec<Vec<usize>> = (0..n).map(|i| g.neighbors(i).map(<[usize]>::to_vec)).collect::<Result<_>>()?;

    let mut h0 = vec![0.0; n * d];
    for (i, x) in inputs.iter().enumerate() {
        matvec_acc(&w[layout.w_in()], x, &mut h0[i * d..(i + 1) * d]);
    }
    let mut layers = vec![h0];
    let mut means = Vec::new();
    let mut pre = Vec::new();

    for k in 0..params.hyper.active_rounds() {
        let h = layers.last().expect("input layer present");
        let mut mean = vec![0.0; n * d];
        for (i, nbrs) in neighbors.iter().enumerate() {
            if nbrs.is_empty() {
                continue;
            }
            let row = &mut mean[i * d..(i + 1) * d];
            for &j in nbrs {
                for (m, v) in row.iter_mut().zip(&h[j * d..(j + 1) * d]) {
                    *m += v;
                }
            }
            let inv = 1.0 / nbrs.len() as f64;
            row.iter_mut().for_each(|m| *m *= inv);
        }
        let mut z = vec![0.0; n * d];
        for i in 0..n {
            let rows = i * d..(i + 1) * d;
            let out = &mut z[rows.clone()];
            out.copy_from_slice(&w[layout.bias(k)]);
            matvec_acc(&w[layout.w_self(k)], &h[rows.clone()], out);
            matvec_acc(&w[layout.w_nbr(k)], &mean[rows], out);
        }
        let next = z.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        means.push(mean);
        pre.push(z);
        layers.push(next);
    }

    Ok(Encoding { n, d, neighbors, inputs, layers, means, pre })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Edge, GraphKind, Node};
    use crate::policy::params::{init_params, EncoderKind, Hyper};

    fn chain(n: usize, compute: &[f64]) -> Graph {
        let nodes = (0..n).map(|id| Node { id, op_type: id % 2, compute: compute[id], memory: 1.0 }).collect();
        let edges = (1..n).map(|i| Edge { src: i - 1, dst: i, bytes: 1.0 }).collect();
        Graph::new(GraphKind::Device, 2, nodes, edges).unwrap()
    }

    fn hyper(rounds: usize, encoder: EncoderKind) -> Hyper {
        Hyper { features: 6, hidden: 4, rounds, locations: 2, encoder }
    }

    #[test]
    fn feature_examples() {
        let single = Graph::new(
            GraphKind::Device,
            3,
            vec![Node { id: 0, op_type: 2, compute: 5.0, memory: 2.0 }],
            vec![],
        )
        .unwrap();
        assert_eq!(node_features(&single, 0).unwrap(), vec![0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0]);

        let g = Graph::new(
            GraphKind::Device,
            1,
            vec![
                Node { id: 0, op_type: 0, compute: 1.0, memory: 1.0 },
                Node { id: 1, op_type: 0, compute: 1.0, memory: 1.0 },
                Node { id: 2, op_type: 0, compute: 2.0, memory: 4.0 },
            ],
            vec![Edge { src: 2, dst: 1, bytes: 1.0 }],
        )
        .unwrap();
        let x0 = node_features(&g, 0).unwrap();
        assert_eq!(&x0[3..], &[0.0, 0.0]);
        assert_eq!(x0, vec![1.0, 0.5, 0.25, 0.0, 0.0]);
        assert_eq!(node_features(&g, 1).unwrap(), vec![1.0, 0.5, 0.25, 1.0, 0.0]);
        assert!(node_features(&g, 3).is_err());
    }

    #[test]
    fn identical_nodes_identical_features() {
        let g = Graph::new(
            GraphKind::Device,
            1,
            (0..2).map(|id| Node { id, op_type: 0, compute: 2.0, memory: 3.0 }).collect(),
            vec![],
        )
        .unwrap();
        assert_eq!(node_features(&g, 0).unwrap(), node_features(&g, 1).unwrap());
    }

    fn with_edges(pairs: &[(usize, usize)]) -> Graph {
        let nodes = (0..4).map(|id| Node { id, op_type: 0, compute: 1.0 + id as f64, memory: 1.0 }).collect();
        let edges = pairs.iter().map(|&(src, dst)| Edge { src, dst, bytes: 1.0 }).collect();
        Graph::new(GraphKind::Device, 2, nodes, edges).unwrap()
    }

    #[test]
    fn flat_ignores_edges() {
        // same in/out degree per node, different wiring
        let a = with_edges(&[(0, 1), (2, 3)]);
        let b = with_edges(&[(0, 3), (2, 1)]);
        let flat = init_params(3, hyper(2, EncoderKind::Flat)).unwrap();
        assert_eq!(encode(&a, &flat).unwrap().embeddings(), encode(&b, &flat).unwrap().embeddings());

        let mp = init_params(3, hyper(2, EncoderKind::MessagePassing)).unwrap();
        assert_ne!(encode(&a, &mp).unwrap().embeddings(), encode(&b, &mp).unwrap().embeddings());
    }

    fn chain_with_op(last_op: usize) -> Graph {
        let mut g = chain(5, &[1.0, 2.0, 3.0, 4.0, 5.0]).as_raw().clone();
        g.nodes[4].op_type = last_op;
        Graph::from_raw(g).unwrap()
    }

    #[test]
    fn one_round_is_local() {
        for seed in 0..10 {
            let params = init_params(seed, hyper(1, EncoderKind::MessagePassing)).unwrap();
            let base = encode(&chain_with_op(0), &params).unwrap();
            let moved = encode(&chain_with_op(1), &params).unwrap();
            for i in 0..3 {
                assert_eq!(base.embedding(i), moved.embedding(i));
            }
        }
    }

    #[test]
    fn two_rounds_reach_two_hops() {
        for seed in 0..10 {
            let mut params = init_params(seed, hyper(2, EncoderKind::MessagePassing)).unwrap();
            // keep every relu open so the 2-hop path cannot be gated off
            let layout = params.layout();
            for k in 0..2 {
                params.weights[layout.bias(k)].iter_mut().for_each(|b| *b = 5.0);
            }
            let base = encode(&chain_with_op(0), &params).unwrap();
            let moved = encode(&chain_with_op(1), &params).unwrap();
            assert_eq!(base.embedding(1), moved.embedding(1));
            assert_ne!(base.embedding(2), moved.embedding(2), "seed {seed}");
        }
    }

    #[test]
    fn dimension_mismatch() {
        let params = init_params(1, Hyper { features: 7, ..hyper(1, EncoderKind::Flat) }).unwrap();
        assert!(matches!(encode(&chain(2, &[1.0, 1.0]), &params), Err(Error::Dimension(_))));
    }
}
