//! The edge-classification network: coordinate/distance/k-NN input
//! embeddings, a stack of gated graph convolution layers with residual
//! connections and batch norm, and an MLP head that emits two logits
//! per directed edge. The class-1 softmax probabilities form the
//! heat-map consumed by the decoders.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::autodiff::{Graph, ParamStore, Phase, Scalar, Var};
use crate::geom::{knn_indicator, tour_to_adjacency, Tour, TspInstance};
use crate::rng::SplitMix64;
use crate::{Error, Result};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GcnConfig {
    /// Graph convolution layers.
    pub l_conv: usize,
    /// MLP depth (hidden layers plus the output affine).
    pub l_mlp: usize,
    /// Hidden width; must be even (edge features concatenate two h/2 halves).
    pub h: usize,
    /// Neighbor count for the k-NN input feature; clamped to `n - 1` at
    /// use time.
    pub k: usize,
    /// Underflow guard in the gate denominator.
    pub epsilon_gate: f64,
}

impl GcnConfig {
    /// Laptop-scale default: 8 layers of width 64.
    pub fn desk_scale() -> Self {
        GcnConfig { l_conv: 8, l_mlp: 3, h: 64, k: 20, epsilon_gate: 1e-20 }
    }

    /// Full-scale configuration (30 layers of width 300).
    pub fn full_scale() -> Self {
        GcnConfig { l_conv: 30, l_mlp: 3, h: 300, k: 20, epsilon_gate: 1e-20 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.h < 2 || !self.h.is_multiple_of(2) {
            return Err(Error::Config(format!("hidden width must be even and >= 2, got {}", self.h)));
        }
        if self.l_conv < 1 || self.l_mlp < 1 {
            return Err(Error::Config(format!(
                "layer counts must be >= 1, got l_conv={} l_mlp={}",
                self.l_conv, self.l_mlp
            )));
        }
        if self.k < 1 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if self.epsilon_gate <= 0.0 {
            return Err(Error::Config("epsilon_gate must be positive".into()));
        }
        Ok(())
    }
}

/// Directed edge probabilities `p[i][j]` in `[0,1]` with a zero
/// diagonal; row-major `n x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatMap {
    n: usize,
    probs: Vec<f64>,
}

impl HeatMap {
    pub fn new(n: usize, mut probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n * n {
            return Err(Error::InvalidArgument(format!(
                "heat-map wants {} entries for n = {n}, got {}",
                n * n,
                probs.len()
            )));
        }
        for i in 0..n {
            probs[i * n + i] = 0.0;
        }
        for (idx, &p) in probs.iter().enumerate() {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!(
                    "heat-map entry ({},{}) = {p} outside [0,1]",
                    idx / n,
                    idx % n
                )));
            }
        }
        Ok(HeatMap { n, probs })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.probs[i * self.n + j]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// `(p + p^T) / 2`; the decoders use directed probabilities by
    /// default, this is the documented alternative.
    pub fn symmetrized(&self) -> HeatMap {
        let n = self.n;
        let mut probs = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                probs[i * n + j] = 0.5 * (self.get(i, j) + self.get(j, i));
            }
        }
        HeatMap { n, probs }
    }

    /// Ideal heat-map of a known tour: probability 1 on tour edges.
    pub fn from_tour(tour: &Tour) -> HeatMap {
        let adj = tour_to_adjacency(tour);
        let n = tour.n();
        let probs = (0..n * n)
            .map(|e| f64::from(adj.get(e / n, e % n)))
            .collect();
        HeatMap { n, probs }
    }
}

/// Balanced class weights `(w0, w1)` for problem size `n`:
/// `w0 = n^2 / ((n^2 - 2n) * c)` and `w1 = n^2 / (2n * c)` with
/// `c = 2` classes.
pub fn class_weights(n: usize) -> (f64, f64) {
    let nf = n as f64;
    let n2 = nf * nf;
    let c = 2.0;
    (n2 / ((n2 - 2.0 * nf) * c), n2 / (2.0 * nf * c))
}

/// Normalized edge gates: `eta[b,i,j,:] =
/// sigmoid(e)[b,i,j,:] / (sum_{j' != i} sigmoid(e)[b,i,j',:] + eps)`.
pub fn edge_gates<S: Scalar>(g: &mut Graph<S>, e: Var, epsilon: f64) -> Result<Var> {
    let sig = g.sigmoid(e);
    let denom = g.neighbor_sum(sig)?;
    let denom = g.add_scalar(denom, epsilon);
    let denom_edges = g.node_to_edges_src(denom)?;
    g.div(sig, denom_edges)
}

enum BnSource<'a, S: Scalar> {
    Train(&'a mut ParamStore<S>),
    Eval(&'a ParamStore<S>),
}

impl<'a, S: Scalar> BnSource<'a, S> {
    fn store(&self) -> &ParamStore<S> {
        match self {
            BnSource::Train(s) => s,
            BnSource::Eval(s) => s,
        }
    }

    /// Batch-norm through the named running-stat buffers; training mode
    /// updates them in place.
    fn batch_norm(
        &mut self,
        g: &mut Graph<S>,
        x: Var,
        gamma: Var,
        beta: Var,
        prefix: &str,
    ) -> Result<Var> {
        let mean_name = format!("{prefix}.running_mean");
        let var_name = format!("{prefix}.running_var");
        match self {
            BnSource::Train(store) => {
                let mut rm = std::mem::take(&mut store.state_mut(&mean_name)?.value);
                let mut rv = std::mem::take(&mut store.state_mut(&var_name)?.value);
                let out =
                    g.batch_norm(x, gamma, beta, &mut rm, &mut rv, BN_EPS, BN_MOMENTUM, true);
                store.state_mut(&mean_name)?.value = rm;
                store.state_mut(&var_name)?.value = rv;
                out
            }
            BnSource::Eval(store) => {
                let mut rm = store.state(&mean_name)?.value.clone();
                let mut rv = store.state(&var_name)?.value.clone();
                g.batch_norm(x, gamma, beta, &mut rm, &mut rv, BN_EPS, BN_MOMENTUM, false)
            }
        }
    }
}

/// The network: a config plus its parameter store.
#[derive(Debug, Clone)]
pub struct Gcn<S: Scalar> {
    config: GcnConfig,
    store: ParamStore<S>,
}

impl<S: Scalar> Gcn<S> {
    /// Fresh network with uniform `+-sqrt(1/fan_in)` affine
    /// initialization drawn from `seed`.
    pub fn new(config: GcnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(seed);
        let h = config.h;
        let half = h / 2;

        let mut affine = |store: &mut ParamStore<S>, name: &str, out: usize, fan_in: usize, bias: bool| -> Result<()> {
            let bound = (1.0 / fan_in as f64).sqrt();
            let mut draw = |len: usize| -> Vec<f64> {
                (0..len).map(|_| (rng.next_f64() * 2.0 - 1.0) * bound).collect()
            };
            store.add_param(&format!("{name}.weight"), vec![out, fan_in], draw(out * fan_in))?;
            if bias {
                store.add_param(&format!("{name}.bias"), vec![out], draw(out))?;
            }
            Ok(())
        };

        affine(&mut store, "embed.node", h, 2, true)?;
        affine(&mut store, "embed.edge_dist", half, 1, true)?;
        affine(&mut store, "embed.edge_knn", half, 3, false)?;
        for l in 0..config.l_conv {
            for w in ["w1", "w2", "w3", "w4", "w5"] {
                affine(&mut store, &format!("conv{l}.{w}"), h, h, false)?;
            }
            for bn in ["bn_node", "bn_edge"] {
                store.add_param(&format!("conv{l}.{bn}.gamma"), vec![h], vec![1.0; h])?;
                store.add_param(&format!("conv{l}.{bn}.beta"), vec![h], vec![0.0; h])?;
                store.add_state(&format!("conv{l}.{bn}.running_mean"), vec![h], vec![0.0; h])?;
                store.add_state(&format!("conv{l}.{bn}.running_var"), vec![h], vec![1.0; h])?;
            }
        }
        for m in 0..config.l_mlp - 1 {
            affine(&mut store, &format!("mlp{m}"), h, h, true)?;
        }
        affine(&mut store, "mlp_out", 2, h, true)?;

        Ok(Gcn { config, store })
    }

    /// Assemble a network around an existing parameter store (used by
    /// the gradient-check harness and checkpoint loading).
    pub fn from_parts(config: GcnConfig, store: ParamStore<S>) -> Result<Self> {
        config.validate()?;
        Ok(Gcn { config, store })
    }

    pub fn config(&self) -> &GcnConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<S> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.store
    }

    /// Coordinate, distance and k-NN input tensors for a same-size batch.
    #[cfg(test)]
    fn batch_inputs(
        &self,
        g: &mut Graph<S>,
        instances: &[&TspInstance],
    ) -> Result<(Var, Var, Var, usize)> {
        Self::batch_inputs_on(&self.config, g, instances)
    }

    fn batch_inputs_on(
        config: &GcnConfig,
        g: &mut Graph<S>,
        instances: &[&TspInstance],
    ) -> Result<(Var, Var, Var, usize)> {
        if instances.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let n = instances[0].n();
        if instances.iter().any(|i| i.n() != n) {
            return Err(Error::InvalidArgument("mixed instance sizes in one batch".into()));
        }
        let bsz = instances.len();
        let k = config.k.min(n - 1);

        let mut coords = Vec::with_capacity(bsz * n * 2);
        let mut dists = Vec::with_capacity(bsz * n * n);
        let mut knn = Vec::with_capacity(bsz * n * n * 3);
        for inst in instances {
            for p in inst.points() {
                coords.push(S::from_f64(p[0]));
                coords.push(S::from_f64(p[1]));
            }
            let indicator = knn_indicator(inst, k)?;
            for i in 0..n {
                for j in 0..n {
                    dists.push(S::from_f64(inst.dist(i, j)));
                    let delta = indicator.get(i, j) as usize;
                    for cls in 0..3 {
                        knn.push(if cls == delta { S::ONE } else { S::ZERO });
                    }
                }
            }
        }
        let coords = g.input(vec![bsz, n, 2], coords)?;
        let dists = g.input(vec![bsz, n, n, 1], dists)?;
        let knn = g.input(vec![bsz, n, n, 3], knn)?;
        Ok((coords, dists, knn, n))
    }

    #[cfg(test)]
    fn embed(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        coords: Var,
        dists: Var,
        knn: Var,
    ) -> Result<(Var, Var)> {
        Self::embed_on(g, store, coords, dists, knn)
    }

    fn embed_on(
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        coords: Var,
        dists: Var,
        knn: Var,
    ) -> Result<(Var, Var)> {
        let a1 = g.param(store, "embed.node.weight")?;
        let b1 = g.param(store, "embed.node.bias")?;
        let x0 = g.linear(coords, a1, Some(b1))?;

        let a2 = g.param(store, "embed.edge_dist.weight")?;
        let b2 = g.param(store, "embed.edge_dist.bias")?;
        let dist_feat = g.linear(dists, a2, Some(b2))?;
        let a3 = g.param(store, "embed.edge_knn.weight")?;
        let knn_feat = g.linear(knn, a3, None)?;
        let e0 = g.concat(dist_feat, knn_feat)?;
        Ok((x0, e0))
    }

    fn conv_layer_on(
        config: &GcnConfig,
        g: &mut Graph<S>,
        bn: &mut BnSource<'_, S>,
        x: Var,
        e: Var,
        layer: usize,
    ) -> Result<(Var, Var)> {
        let p = |g: &mut Graph<S>, bn: &BnSource<'_, S>, name: String| -> Result<Var> {
            g.param(bn.store(), &name)
        };
        let w1 = p(g, bn, format!("conv{layer}.w1.weight"))?;
        let w2 = p(g, bn, format!("conv{layer}.w2.weight"))?;
        let w3 = p(g, bn, format!("conv{layer}.w3.weight"))?;
        let w4 = p(g, bn, format!("conv{layer}.w4.weight"))?;
        let w5 = p(g, bn, format!("conv{layer}.w5.weight"))?;

        // node update: x + ReLU(BN(W1 x + sum_j eta .* W2 x_j))
        let eta = edge_gates(g, e, config.epsilon_gate)?;
        let w2x = g.linear(x, w2, None)?;
        let messages = g.node_to_edges_dst(w2x)?;
        let gated = g.elementwise_mul(eta, messages)?;
        let agg = g.neighbor_sum(gated)?;
        let w1x = g.linear(x, w1, None)?;
        let node_pre = g.add(w1x, agg)?;
        let ng = p(g, bn, format!("conv{layer}.bn_node.gamma"))?;
        let nb = p(g, bn, format!("conv{layer}.bn_node.beta"))?;
        let node_bn = bn.batch_norm(g, node_pre, ng, nb, &format!("conv{layer}.bn_node"))?;
        let node_act = g.relu(node_bn);
        let x_next = g.add(x, node_act)?;

        // edge update: e + ReLU(BN(W3 e + W4 x_i + W5 x_j))
        let w3e = g.linear(e, w3, None)?;
        let w4x = g.linear(x, w4, None)?;
        let w5x = g.linear(x, w5, None)?;
        let src = g.node_to_edges_src(w4x)?;
        let dst = g.node_to_edges_dst(w5x)?;
        let sum = g.add(w3e, src)?;
        let edge_pre = g.add(sum, dst)?;
        let eg = p(g, bn, format!("conv{layer}.bn_edge.gamma"))?;
        let eb = p(g, bn, format!("conv{layer}.bn_edge.beta"))?;
        let edge_bn = bn.batch_norm(g, edge_pre, eg, eb, &format!("conv{layer}.bn_edge"))?;
        let edge_act = g.relu(edge_bn);
        let e_next = g.add(e, edge_act)?;

        Ok((x_next, e_next))
    }

    /// One graph convolution layer; exposed for layer-level tests.
    pub fn conv_layer(
        &mut self,
        g: &mut Graph<S>,
        x: Var,
        e: Var,
        layer: usize,
        phase: Phase,
    ) -> Result<(Var, Var)> {
        let mut bn = match phase {
            Phase::Train => BnSource::Train(&mut self.store),
            Phase::Eval => BnSource::Eval(&self.store),
        };
        Self::conv_layer_on(&self.config, g, &mut bn, x, e, layer)
    }

    fn mlp_head(
        config: &GcnConfig,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        e: Var,
    ) -> Result<Var> {
        let mut t = e;
        for m in 0..config.l_mlp - 1 {
            let w = g.param(store, &format!("mlp{m}.weight"))?;
            let b = g.param(store, &format!("mlp{m}.bias"))?;
            let affine = g.linear(t, w, Some(b))?;
            t = g.relu(affine);
        }
        let w = g.param(store, "mlp_out.weight")?;
        let b = g.param(store, "mlp_out.bias")?;
        g.linear(t, w, Some(b))
    }

    fn forward_on(
        config: &GcnConfig,
        g: &mut Graph<S>,
        bn: &mut BnSource<'_, S>,
        instances: &[&TspInstance],
    ) -> Result<Var> {
        let (coords, dists, knn, _n) = Self::batch_inputs_on(config, g, instances)?;
        let (mut x, mut e) = Self::embed_on(g, bn.store(), coords, dists, knn)?;
        for layer in 0..config.l_conv {
            let (nx, ne) = Self::conv_layer_on(config, g, bn, x, e, layer)?;
            x = nx;
            e = ne;
        }
        Self::mlp_head(config, g, bn.store(), e)
    }

    /// Forward pass to per-edge logits `[batch, n, n, 2]`.
    pub fn forward(
        &mut self,
        g: &mut Graph<S>,
        instances: &[&TspInstance],
        phase: Phase,
    ) -> Result<Var> {
        let config = self.config;
        match phase {
            Phase::Train => {
                let mut bn = BnSource::Train(&mut self.store);
                Self::forward_on(&config, g, &mut bn, instances)
            }
            Phase::Eval => self.forward_eval(g, instances),
        }
    }

    /// Evaluation-mode forward with frozen batch-norm statistics; takes
    /// `&self` so callers may run batches in parallel.
    pub fn forward_eval(&self, g: &mut Graph<S>, instances: &[&TspInstance]) -> Result<Var> {
        let mut bn = BnSource::Eval(&self.store);
        Self::forward_on(&self.config, g, &mut bn, instances)
    }

    /// Weighted cross-entropy of `logits` against the tours' adjacency
    /// targets.
    pub fn loss(
        &self,
        g: &mut Graph<S>,
        logits: Var,
        tours: &[&Tour],
    ) -> Result<Var> {
        let shape = g.shape(logits).to_vec();
        let (bsz, n) = (shape[0], shape[1]);
        if tours.len() != bsz {
            return Err(Error::InvalidArgument(format!(
                "{} tours for a batch of {bsz}",
                tours.len()
            )));
        }
        let mut targets = Vec::with_capacity(bsz * n * n);
        for tour in tours {
            if tour.n() != n {
                return Err(Error::InvalidArgument(format!(
                    "tour over {} nodes in a batch of size-{n} instances",
                    tour.n()
                )));
            }
            let adj = tour_to_adjacency(tour);
            for i in 0..n {
                for j in 0..n {
                    targets.push(adj.get(i, j));
                }
            }
        }
        let (w0, w1) = class_weights(n);
        g.weighted_ce_loss(logits, &targets, w0, w1)
    }

    /// Per-instance heat-maps (class-1 softmax probability per directed
    /// edge), evaluation mode.
    pub fn heatmaps(&self, instances: &[&TspInstance]) -> Result<Vec<HeatMap>> {
        let mut g = Graph::new();
        let logits = self.forward_eval(&mut g, instances)?;
        let probs = g.softmax(logits)?;
        let p1 = g.gather(probs, 1)?;
        let n = instances[0].n();
        let vals = g.value(p1);
        let mut out = Vec::with_capacity(instances.len());
        for b in 0..instances.len() {
            let slice = &vals[b * n * n..(b + 1) * n * n];
            let probs: Vec<f64> = slice.iter().map(|&p| p.to_f64().clamp(0.0, 1.0)).collect();
            out.push(HeatMap::new(n, probs)?);
        }
        Ok(out)
    }
}

const CHECKPOINT_MAGIC: &str = "tspnet-checkpoint v1";

/// Write a checkpoint: a text header (architecture, step counter, tensor
/// directory) followed by raw little-endian `f32` values in header order.
///
/// Tensor directory lines are `tensor <kind> <name> f32 <d0>x<d1>x...`
/// with kind one of `param`, `adam_m`, `adam_v`, `state`.
pub fn save_checkpoint(gcn: &Gcn<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io_err = |e| Error::io(path.display().to_string(), e);
    let file = std::fs::File::create(path).map_err(io_err)?;
    let mut w = std::io::BufWriter::new(file);
    let c = gcn.config();
    writeln!(w, "{CHECKPOINT_MAGIC}").map_err(io_err)?;
    writeln!(
        w,
        "arch l_conv={} l_mlp={} h={} k={} epsilon_gate={:e}",
        c.l_conv, c.l_mlp, c.h, c.k, c.epsilon_gate
    )
    .map_err(io_err)?;
    writeln!(w, "adam_step {}", gcn.store().step()).map_err(io_err)?;

    let dims = |shape: &[usize]| {
        shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
    };
    let mut order: Vec<(&str, &str, &[f32])> = Vec::new();
    for (name, p) in gcn.store().params() {
        writeln!(w, "tensor param {name} f32 {}", dims(&p.shape)).map_err(io_err)?;
        writeln!(w, "tensor adam_m {name} f32 {}", dims(&p.shape)).map_err(io_err)?;
        writeln!(w, "tensor adam_v {name} f32 {}", dims(&p.shape)).map_err(io_err)?;
        order.push(("param", name, &p.value));
        order.push(("adam_m", name, &p.m));
        order.push(("adam_v", name, &p.v));
    }
    for (name, s) in gcn.store().states() {
        writeln!(w, "tensor state {name} f32 {}", dims(&s.shape)).map_err(io_err)?;
        order.push(("state", name, &s.value));
    }
    writeln!(w, "end").map_err(io_err)?;
    for (_, _, values) in order {
        for v in values {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

/// Reload a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Gcn<f32>> {
    let path = path.as_ref();
    let io_err = |e| Error::io(path.display().to_string(), e);
    let file = std::fs::File::open(path).map_err(io_err)?;
    let mut r = BufReader::new(file);

    let mut line = String::new();
    let mut line_no = 0usize;
    let mut read_line = |r: &mut BufReader<std::fs::File>, line: &mut String| -> Result<usize> {
        line.clear();
        line_no += 1;
        let read = r.read_line(line).map_err(io_err)?;
        Ok(read)
    };
    let bad = |line: usize, msg: String| Error::Parse { line, message: msg };

    read_line(&mut r, &mut line)?;
    if line.trim_end() != CHECKPOINT_MAGIC {
        return Err(bad(1, format!("not a checkpoint file (header '{}')", line.trim_end())));
    }

    read_line(&mut r, &mut line)?;
    let arch = line
        .trim_end()
        .strip_prefix("arch ")
        .ok_or_else(|| bad(2, "missing arch line".into()))?;
    let mut config = GcnConfig { l_conv: 0, l_mlp: 0, h: 0, k: 0, epsilon_gate: 0.0 };
    for kv in arch.split_whitespace() {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| bad(2, format!("bad arch token '{kv}'")))?;
        match key {
            "l_conv" => config.l_conv = value.parse().map_err(|_| bad(2, format!("bad l_conv '{value}'")))?,
            "l_mlp" => config.l_mlp = value.parse().map_err(|_| bad(2, format!("bad l_mlp '{value}'")))?,
            "h" => config.h = value.parse().map_err(|_| bad(2, format!("bad h '{value}'")))?,
            "k" => config.k = value.parse().map_err(|_| bad(2, format!("bad k '{value}'")))?,
            "epsilon_gate" => {
                config.epsilon_gate =
                    value.parse().map_err(|_| bad(2, format!("bad epsilon_gate '{value}'")))?
            }
            other => return Err(bad(2, format!("unknown arch key '{other}'"))),
        }
    }
    config.validate()?;

    read_line(&mut r, &mut line)?;
    let step: u64 = line
        .trim_end()
        .strip_prefix("adam_step ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad(3, "missing adam_step line".into()))?;

    // tensor directory, in file order
    let mut directory: Vec<(String, String, Vec<usize>)> = Vec::new();
    let mut header_lines = 3;
    loop {
        read_line(&mut r, &mut line)?;
        header_lines += 1;
        let t = line.trim_end();
        if t == "end" {
            break;
        }
        let mut parts = t.split_whitespace();
        let fields = (
            parts.next(),
            parts.next(),
            parts.next(),
            parts.next(),
            parts.next(),
        );
        match fields {
            (Some("tensor"), Some(kind), Some(name), Some("f32"), Some(dims)) => {
                let shape: Vec<usize> = dims
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad(header_lines, format!("bad dims '{dims}'")))?;
                directory.push((kind.to_string(), name.to_string(), shape));
            }
            (Some("tensor"), _, _, Some(dtype), _) if dtype != "f32" => {
                return Err(bad(header_lines, format!("unsupported dtype '{dtype}'")))
            }
            _ => return Err(bad(header_lines, format!("bad tensor line '{t}'"))),
        }
    }

    let mut store: ParamStore<f32> = ParamStore::new();
    for (kind, name, shape) in &directory {
        let count: usize = shape.iter().product();
        let mut buf = vec![0u8; count * 4];
        r.read_exact(&mut buf).map_err(io_err)?;
        let values: Vec<f32> = buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        match kind.as_str() {
            "param" => {
                store.add_param(name, shape.clone(), vec![0.0; count])?;
                store.param_mut(name)?.value = values;
            }
            "adam_m" => store.param_mut(name)?.m = values,
            "adam_v" => store.param_mut(name)?.v = values,
            "state" => {
                store.add_state(name, shape.clone(), vec![0.0; count])?;
                store.state_mut(name)?.value = values;
            }
            other => {
                return Err(bad(header_lines, format!("unknown tensor kind '{other}'")))
            }
        }
    }
    store.set_step(step);
    Ok(Gcn { config, store })
}
