//! The flow network: edge convolutions over the hypothesis graph and
//! the per-hypothesis scoring head.
//!
//! Each edge convolution computes, for every point p with neighbors q,
//! a shared two-layer perceptron of the pair `(C_p, C_p - C_q)` and
//! reduces the k edge responses with a symmetric pooling (max or
//! average). An ablated variant feeds the perceptron `C_q` alone,
//! discarding the relation to the centroid. Three layers run in
//! sequence; their outputs concatenate (a shortcut) into a shared
//! perceptron ending in one scalar per hypothesis, and a softmax across
//! each base point's hypotheses yields displacement probabilities.

use ndarray::{Array1, Array2, ArrayD, IxDyn};

use crate::autodiff::{Tape, Var};
use crate::config::{Aggregation, ModelConfig};
use crate::error::{Error, Result};
use crate::model::{BoundTape, ParamStore};

use super::knn::KnnGraph;
use super::HypothesisCloud;

/// Number of edge-convolution layers feeding the shortcut.
pub const EDGE_CONV_LAYERS: usize = 3;

fn leaf_matrix(tape: &mut Tape, m: &Array2<f64>) -> Var {
    tape.leaf(m.clone().into_dyn())
}

/// One edge convolution for a set of center points, as a tape
/// expression.
///
/// `features` is `[N, F]`; `centers` lists the points to produce
/// outputs for and `neighbors` their flattened neighbor indices
/// (`centers.len() * k` entries into the full feature rows). Both the
/// full-graph and the chunked evaluators build on this, so their
/// per-row arithmetic is identical.
fn edge_conv_rows(
    bt: &mut BoundTape,
    store: &ParamStore,
    layer: usize,
    features: Var,
    centers: &[usize],
    neighbors: &[usize],
    k: usize,
    aggregation: Aggregation,
    ablated: bool,
) -> Result<Var> {
    let shape = bt.tape.value(features).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::data(format!(
            "edge convolution expects [N, F] features, got {shape:?}"
        )));
    }
    let f = shape[1];
    debug_assert_eq!(neighbors.len(), centers.len() * k);
    let w1 = bt.param(store, &format!("flow.ec{layer}.m1.w"))?;
    let b1 = bt.param(store, &format!("flow.ec{layer}.m1.b"))?;
    let expected = bt.tape.value(w1).shape()[1];
    let edge_dim = if ablated { f } else { 2 * f };
    if expected != edge_dim {
        return Err(Error::data(format!(
            "edge layer {layer} expects width-{expected} edge features, got {edge_dim} \
             (feature dim {f}, ablated = {ablated})"
        )));
    }

    let neighbor_rows = bt.tape.gather(features, neighbors);
    let edge_input = if ablated {
        neighbor_rows
    } else {
        let center_idx: Vec<usize> = centers
            .iter()
            .flat_map(|&i| std::iter::repeat_n(i, k))
            .collect();
        let center_rows = bt.tape.gather(features, &center_idx);
        let diff = bt.tape.sub(center_rows, neighbor_rows);
        bt.tape.concat(&[center_rows, diff], 1)
    };
    let h = bt.tape.linear(edge_input, w1, b1);
    let h = bt.tape.relu(h);
    let w2 = bt.param(store, &format!("flow.ec{layer}.m2.w"))?;
    let b2 = bt.param(store, &format!("flow.ec{layer}.m2.b"))?;
    let h = bt.tape.linear(h, w2, b2);
    let h = bt.tape.relu(h);
    let width = bt.tape.value(h).shape()[1];
    let stacked = bt.tape.reshape(h, &[centers.len(), k, width]);
    Ok(match aggregation {
        Aggregation::Max => bt.tape.max_mid(stacked),
        Aggregation::Avg => bt.tape.mean_mid(stacked),
    })
}

/// One edge convolution as a tape expression.
///
/// `features` is `[N, F]`; the result is `[N, W]` where `W` is the
/// layer's perceptron width. With `ablated` the perceptron sees only
/// the neighbor feature.
pub fn edge_conv_on_tape(
    bt: &mut BoundTape,
    store: &ParamStore,
    layer: usize,
    features: Var,
    graph: &KnnGraph,
    aggregation: Aggregation,
    ablated: bool,
) -> Result<Var> {
    let n = bt.tape.value(features).shape()[0];
    if graph.len() != n {
        return Err(Error::data(format!(
            "graph covers {} points but features cover {n}",
            graph.len()
        )));
    }
    let centers: Vec<usize> = (0..n).collect();
    edge_conv_rows(
        bt,
        store,
        layer,
        features,
        &centers,
        graph.flat(),
        graph.k(),
        aggregation,
        ablated,
    )
}

/// One edge convolution over plain feature rows:
/// `out_p = pool_{q in kNN(p)} h(C_p, C_p - C_q)`.
pub fn edge_conv(
    store: &ParamStore,
    layer: usize,
    features: &Array2<f64>,
    graph: &KnnGraph,
    aggregation: Aggregation,
) -> Result<Array2<f64>> {
    run_edge_conv(store, layer, features, graph, aggregation, false)
}

/// Ablated edge convolution: the perceptron sees each neighbor feature
/// alone, `out_p = pool_{q in kNN(p)} h(C_q)`.
pub fn edge_conv_ablated(
    store: &ParamStore,
    layer: usize,
    features: &Array2<f64>,
    graph: &KnnGraph,
    aggregation: Aggregation,
) -> Result<Array2<f64>> {
    run_edge_conv(store, layer, features, graph, aggregation, true)
}

fn run_edge_conv(
    store: &ParamStore,
    layer: usize,
    features: &Array2<f64>,
    graph: &KnnGraph,
    aggregation: Aggregation,
    ablated: bool,
) -> Result<Array2<f64>> {
    let mut bt = BoundTape::new();
    let f = leaf_matrix(&mut bt.tape, features);
    let out = edge_conv_on_tape(&mut bt, store, layer, f, graph, aggregation, ablated)?;
    Ok(bt
        .tape
        .value(out)
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("edge conv output is 2-d"))
}

/// The full flow network as a tape expression: three edge convolutions,
/// shortcut concatenation, shared scoring perceptron, and a softmax
/// over each base point's hypotheses. `features` is `[N, F]` with
/// `N = points * hypotheses_per_point`; returns `[points,
/// hypotheses_per_point]` probability rows.
pub fn predict_flow_on_tape(
    bt: &mut BoundTape,
    store: &ParamStore,
    model: &ModelConfig,
    features: Var,
    graph: &KnnGraph,
    points: usize,
    hypotheses_per_point: usize,
) -> Result<Var> {
    let n = bt.tape.value(features).shape()[0];
    if points * hypotheses_per_point != n {
        return Err(Error::data(format!(
            "{points} points x {hypotheses_per_point} hypotheses != {n} feature rows"
        )));
    }
    let mut taps = Vec::with_capacity(EDGE_CONV_LAYERS);
    let mut current = features;
    for layer in 1..=EDGE_CONV_LAYERS {
        current = edge_conv_on_tape(
            bt,
            store,
            layer,
            current,
            graph,
            model.aggregation,
            model.ablate_edge_conv,
        )?;
        taps.push(current);
    }
    let cat = bt.tape.concat(&taps, 1);
    flow_head_on_tape(bt, store, cat, points, hypotheses_per_point)
}

/// The scoring head: shared perceptron over the concatenated edge-conv
/// outputs, one score per hypothesis, softmax across each base point's
/// hypotheses.
fn flow_head_on_tape(
    bt: &mut BoundTape,
    store: &ParamStore,
    cat: Var,
    points: usize,
    hypotheses_per_point: usize,
) -> Result<Var> {
    let w1 = bt.param(store, "flow.head.h1.w")?;
    let b1 = bt.param(store, "flow.head.h1.b")?;
    let h = bt.tape.linear(cat, w1, b1);
    let h = bt.tape.relu(h);
    let w2 = bt.param(store, "flow.head.h2.w")?;
    let b2 = bt.param(store, "flow.head.h2.b")?;
    let h = bt.tape.linear(h, w2, b2);
    let h = bt.tape.relu(h);
    let wo = bt.param(store, "flow.head.out.w")?;
    let bo = bt.param(store, "flow.head.out.b")?;
    let scores = bt.tape.linear(h, wo, bo);
    let rows = bt.tape.reshape(scores, &[points, hypotheses_per_point]);
    Ok(bt.tape.softmax_axis(rows, 1))
}

/// Memory-bounded evaluation of the full flow network: each edge
/// convolution runs in chunks of `chunk` hypothesis rows on short-lived
/// tapes, so peak memory scales with `chunk * k` edge rows instead of
/// `N * k`. Per-row arithmetic is identical to `predict_flow_on_tape`,
/// so outputs match it bit for bit.
pub(crate) fn flow_forward_chunked(
    store: &ParamStore,
    model: &ModelConfig,
    features: &Array2<f64>,
    graph: &KnnGraph,
    points: usize,
    hypotheses_per_point: usize,
    chunk: usize,
) -> Result<Array2<f64>> {
    let n = features.nrows();
    if points * hypotheses_per_point != n {
        return Err(Error::data(format!(
            "{points} points x {hypotheses_per_point} hypotheses != {n} feature rows"
        )));
    }
    if graph.len() != n {
        return Err(Error::data(format!(
            "graph covers {} points but features cover {n}",
            graph.len()
        )));
    }
    let chunk = chunk.max(1);
    let mut taps: Vec<Array2<f64>> = Vec::with_capacity(EDGE_CONV_LAYERS);
    let mut current = features.clone();
    for layer in 1..=EDGE_CONV_LAYERS {
        let mut out: Option<Array2<f64>> = None;
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            let centers: Vec<usize> = (start..end).collect();
            let neighbors: Vec<usize> = centers
                .iter()
                .flat_map(|&i| graph.neighbors_of(i).iter().copied())
                .collect();
            let mut bt = BoundTape::new();
            let f = leaf_matrix(&mut bt.tape, &current);
            let pooled = edge_conv_rows(
                &mut bt,
                store,
                layer,
                f,
                &centers,
                &neighbors,
                graph.k(),
                model.aggregation,
                model.ablate_edge_conv,
            )?;
            let vals = bt
                .tape
                .value(pooled)
                .clone()
                .into_dimensionality::<ndarray::Ix2>()
                .expect("edge conv output is 2-d");
            let sink = out.get_or_insert_with(|| Array2::zeros((n, vals.ncols())));
            sink.slice_mut(ndarray::s![start..end, ..]).assign(&vals);
            start = end;
        }
        current = out.expect("at least one chunk");
        taps.push(current.clone());
    }
    let views: Vec<_> = taps.iter().map(|t| t.view()).collect();
    let cat = ndarray::concatenate(ndarray::Axis(1), &views).expect("tap rows match");
    let mut bt = BoundTape::new();
    let cat = leaf_matrix(&mut bt.tape, &cat);
    let probs = flow_head_on_tape(&mut bt, store, cat, points, hypotheses_per_point)?;
    Ok(bt
        .tape
        .value(probs)
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("probability rows are 2-d"))
}

/// Hypothesis rows per chunk in the memory-bounded forward pass.
pub(crate) const FLOW_CHUNK_ROWS: usize = 2048;

/// Score a populated hypothesis cloud: probability rows over each base
/// point's hypotheses, rows summing to one.
pub fn predict_flow(
    store: &ParamStore,
    model: &ModelConfig,
    cloud: &HypothesisCloud,
    graph: &KnnGraph,
) -> Result<Array2<f64>> {
    let features = cloud.features().ok_or_else(|| {
        Error::data("hypothesis cloud has no features attached; fetch them first")
    })?;
    flow_forward_chunked(
        store,
        model,
        features,
        graph,
        cloud.num_points(),
        cloud.hypotheses_per_point(),
        FLOW_CHUNK_ROWS,
    )
}

/// Signed hypothesis offsets `(k - m) * s` for `k = 0..2m`.
pub fn hypothesis_offsets(step: f64, m: usize) -> Vec<f64> {
    (0..2 * m + 1)
        .map(|k| (k as f64 - m as f64) * step)
        .collect()
}

/// Expected depth displacement per base point as a tape expression:
/// probability rows `[P, 2m+1]` dotted with the signed offsets.
pub fn expected_displacement_on_tape(tape: &mut Tape, probs: Var, step: f64, m: usize) -> Var {
    let offsets = hypothesis_offsets(step, m);
    let off = tape.leaf(ArrayD::from_shape_vec(IxDyn(&[offsets.len()]), offsets).unwrap());
    tape.dot_rows(probs, off)
}

/// Expected depth displacement per base point (mm):
/// `dd_p = sum_k (k - m) * s * prob[p][k]`.
///
/// Rows whose sum deviates from one by more than 1e-3 are rejected.
pub fn expected_displacement(probs: &Array2<f64>, step: f64, m: usize) -> Result<Array1<f64>> {
    let (p, cols) = probs.dim();
    if cols != 2 * m + 1 {
        return Err(Error::data(format!(
            "expected {} hypothesis columns for m = {m}, got {cols}",
            2 * m + 1
        )));
    }
    if step <= 0.0 {
        return Err(Error::config(format!("step must be positive, got {step}")));
    }
    for row in 0..p {
        let sum: f64 = probs.row(row).sum();
        if (sum - 1.0).abs() > 1e-3 {
            return Err(Error::numerical(format!(
                "probability row {row} sums to {sum}"
            )));
        }
    }
    let mut tape = Tape::new();
    let pr = leaf_matrix(&mut tape, probs);
    let dd = expected_displacement_on_tape(&mut tape, pr, step, m);
    Ok(tape
        .value(dd)
        .clone()
        .into_dimensionality::<ndarray::Ix1>()
        .expect("displacements are 1-d"))
}
