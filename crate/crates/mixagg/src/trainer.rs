//! Metric-learning training: place-structured batch sampling, the
//! multi-similarity loss with pair mining, SGD with momentum and coupled
//! weight decay, a step learning-rate schedule, and the end-to-end `fit`
//! loop.
//!
//! Everything is seed-deterministic: the same manifest, configs, and seed
//! produce bit-identical loss curves and checkpoints.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aggregator::{
    aggregate_graph, flatten_maps, register_params, MixVprConfig, MixVprParams,
};
use crate::data_io::{self, Manifest};
use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Scalar, Tensor};

// ── Batch sampling ──────────────────────────────────────────────────

/// Place-structured batch shape: P places, K images each.
#[derive(Clone, Copy, Debug)]
pub struct BatchSpec {
    pub places_per_batch: usize,
    pub views_per_place: usize,
}

impl Default for BatchSpec {
    fn default() -> Self {
        // Full-scale training batches: 120 places × 4 images.
        BatchSpec {
            places_per_batch: 120,
            views_per_place: 4,
        }
    }
}

impl BatchSpec {
    pub fn batch_size(&self) -> usize {
        self.places_per_batch * self.views_per_place
    }

    pub fn validate(&self) -> Result<()> {
        if self.places_per_batch == 0 || self.views_per_place == 0 {
            return Err(Error::Param(format!(
                "batch shape must be >= 1x1, got {}x{}",
                self.places_per_batch, self.views_per_place
            )));
        }
        Ok(())
    }
}

/// One training sample: a manifest record index and its place label.
/// Labels index the sorted list of eligible places.
pub type BatchSample = (usize, usize);

/// Draws P distinct places (each with ≥ K images), K distinct images per
/// place, then shuffles the flattened batch. Fully determined by the rng
/// state.
pub fn sample_batch(
    manifest: &Manifest,
    spec: &BatchSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<BatchSample>> {
    spec.validate()?;
    let places = manifest.places();
    let eligible: Vec<(&str, &Vec<usize>)> = places
        .iter()
        .filter(|(_, idxs)| idxs.len() >= spec.views_per_place)
        .map(|(p, idxs)| (*p, idxs))
        .collect();
    if eligible.len() < spec.places_per_batch {
        return Err(Error::Data(format!(
            "batch needs {} places with >= {} views, manifest has {} (of {} total)",
            spec.places_per_batch,
            spec.views_per_place,
            eligible.len(),
            places.len()
        )));
    }
    let chosen = rand::seq::index::sample(rng, eligible.len(), spec.places_per_batch);
    let mut batch = Vec::with_capacity(spec.batch_size());
    for label in chosen {
        let (_, record_idxs) = eligible[label];
        let picks = rand::seq::index::sample(rng, record_idxs.len(), spec.views_per_place);
        for pick in picks {
            batch.push((record_idxs[pick], label));
        }
    }
    batch.shuffle(rng);
    Ok(batch)
}

// ── Multi-similarity loss ───────────────────────────────────────────

/// Loss hyperparameters: `alpha`/`beta` temper the positive/negative
/// terms, `lambda` is the similarity base, `epsilon` the mining margin.
#[derive(Clone, Copy, Debug)]
pub struct MsLossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub epsilon: f64,
}

impl Default for MsLossConfig {
    fn default() -> Self {
        MsLossConfig {
            alpha: 1.0,
            beta: 50.0,
            lambda: 0.0,
            epsilon: 0.1,
        }
    }
}

impl MsLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !(self.beta > 0.0) {
            return Err(Error::Param(format!(
                "alpha and beta must be > 0, got {} / {}",
                self.alpha, self.beta
            )));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::Param(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Mined pair sets per anchor, by row index into the similarity matrix.
#[derive(Clone, Debug)]
pub struct MsMining {
    pub positives: Vec<Vec<usize>>,
    pub negatives: Vec<Vec<usize>>,
}

/// Pair mining on a `[B × B]` similarity matrix: for anchor i, keep
/// negatives scoring above the weakest positive minus `epsilon` and
/// positives scoring below the strongest negative plus `epsilon`. Anchors
/// without same-label partners mine nothing.
pub fn mine_pairs<T: Scalar>(s: &Tensor<T>, labels: &[usize], epsilon: f64) -> Result<MsMining> {
    let (b, b2) = s.dims2("mine_pairs")?;
    if b != b2 || b != labels.len() {
        return Err(Error::Contract(format!(
            "similarity matrix {:?} does not match {} labels",
            s.dims(),
            labels.len()
        )));
    }
    let eps = T::from_f64(epsilon);
    let mut positives = vec![Vec::new(); b];
    let mut negatives = vec![Vec::new(); b];
    for i in 0..b {
        let row = s.row(i);
        let pos_idx: Vec<usize> = (0..b).filter(|&j| j != i && labels[j] == labels[i]).collect();
        let neg_idx: Vec<usize> = (0..b).filter(|&j| labels[j] != labels[i]).collect();
        if pos_idx.is_empty() || neg_idx.is_empty() {
            continue;
        }
        let min_pos = pos_idx
            .iter()
            .map(|&j| row[j])
            .fold(row[pos_idx[0]], |a, v| if v < a { v } else { a });
        let max_neg = neg_idx
            .iter()
            .map(|&j| row[j])
            .fold(row[neg_idx[0]], |a, v| if v > a { v } else { a });
        positives[i] = pos_idx.into_iter().filter(|&j| row[j] < max_neg + eps).collect();
        negatives[i] = neg_idx.into_iter().filter(|&j| row[j] > min_pos - eps).collect();
    }
    Ok(MsMining { positives, negatives })
}

/// Builds the multi-similarity loss over descriptor nodes:
/// re-normalize, form S = D·Dᵀ, mine pairs on the values, then
/// `mean_i[(1/α)·ln(1 + Σ_mined-pos e^{−α(S−λ)}) + (1/β)·ln(1 + Σ_mined-neg e^{β(S−λ)})]`
/// over anchors with at least one mined pair. Mined sets are treated as
/// constants of the differentiation.
pub fn ms_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    descriptors: &[NodeId],
    labels: &[usize],
    cfg: &MsLossConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    if descriptors.len() != labels.len() || descriptors.len() < 2 {
        return Err(Error::Contract(format!(
            "need >= 2 labelled descriptors, got {} descriptors / {} labels",
            descriptors.len(),
            labels.len()
        )));
    }
    let distinct: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::Contract(
            "multi-similarity loss needs at least two distinct labels (no negatives exist)".into(),
        ));
    }
    let b = descriptors.len();
    let renormed: Vec<NodeId> = descriptors
        .iter()
        .map(|&d| g.l2_normalize(d))
        .collect::<Result<_>>()?;
    let d_matrix = g.stack_rows(&renormed)?;
    let d_t = g.transpose(d_matrix)?;
    let s = g.matmul(d_matrix, d_t)?;

    let mining = mine_pairs(g.value(s), labels, cfg.epsilon)?;
    let mut pos_mask = vec![T::ZERO; b * b];
    let mut neg_mask = vec![T::ZERO; b * b];
    let mut active = 0usize;
    for i in 0..b {
        if mining.positives[i].is_empty() && mining.negatives[i].is_empty() {
            continue;
        }
        active += 1;
        for &j in &mining.positives[i] {
            pos_mask[i * b + j] = T::ONE;
        }
        for &j in &mining.negatives[i] {
            neg_mask[i * b + j] = T::ONE;
        }
    }
    if active == 0 {
        log::warn!("multi-similarity mining excluded every anchor; loss is 0");
        return Ok(g.leaf(Tensor::scalar(T::ZERO)));
    }

    let alpha = T::from_f64(cfg.alpha);
    let beta = T::from_f64(cfg.beta);
    let shifted = g.add_scalar(s, -T::from_f64(cfg.lambda));
    let ones = g.leaf(Tensor::filled(vec![b, 1], T::ONE));

    let scaled_pos = g.scale(shifted, -alpha);
    let exp_pos = g.exp(scaled_pos)?;
    let pos_mask_node = g.leaf(Tensor::new(vec![b, b], pos_mask)?);
    let masked_pos = g.mul(exp_pos, pos_mask_node)?;
    let pos_sums = g.matmul(masked_pos, ones)?;
    let pos_plus1 = g.add_scalar(pos_sums, T::ONE);
    let pos_log = g.ln(pos_plus1)?;
    let pos_term = g.scale(pos_log, T::ONE / alpha);

    let scaled_neg = g.scale(shifted, beta);
    let exp_neg = g.exp(scaled_neg)?;
    let neg_mask_node = g.leaf(Tensor::new(vec![b, b], neg_mask)?);
    let masked_neg = g.mul(exp_neg, neg_mask_node)?;
    let neg_sums = g.matmul(masked_neg, ones)?;
    let neg_plus1 = g.add_scalar(neg_sums, T::ONE);
    let neg_log = g.ln(neg_plus1)?;
    let neg_term = g.scale(neg_log, T::ONE / beta);

    let per_anchor = g.add(pos_term, neg_term)?;
    let summed = g.sum(per_anchor);
    Ok(g.scale(summed, T::ONE / T::from_f64(active as f64)))
}

// ── Optimizer ───────────────────────────────────────────────────────

/// SGD state: hyperparameters, the step schedule, and per-parameter
/// velocity buffers keyed by tensor name.
#[derive(Clone, Debug)]
pub struct OptimState {
    /// Initial learning rate.
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epoch interval between learning-rate cuts.
    pub lr_decay_every: usize,
    /// Factor the rate is divided by at each cut.
    pub lr_divisor: f64,
    pub max_epochs: usize,
    velocities: BTreeMap<String, Tensor<f32>>,
}

impl Default for OptimState {
    fn default() -> Self {
        OptimState {
            lr0: 0.05,
            momentum: 0.9,
            weight_decay: 0.001,
            lr_decay_every: 5,
            lr_divisor: 3.0,
            max_epochs: 30,
            velocities: BTreeMap::new(),
        }
    }
}

impl OptimState {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::Param(format!("learning rate must be > 0, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Param(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Param(format!("weight decay must be >= 0, got {}", self.weight_decay)));
        }
        if self.lr_decay_every == 0 || !(self.lr_divisor >= 1.0) {
            return Err(Error::Param(format!(
                "schedule needs decay interval >= 1 and divisor >= 1, got {} / {}",
                self.lr_decay_every, self.lr_divisor
            )));
        }
        Ok(())
    }
}

/// Step learning rate: `lr0 / divisor^floor(epoch / every)`.
pub fn lr_schedule(state: &OptimState, epoch: usize) -> f64 {
    state.lr0 / state.lr_divisor.powi((epoch / state.lr_decay_every) as i32)
}

/// One SGD step with coupled weight decay:
/// `v ← m·v + (g + wd·θ); θ ← θ − lr·v`. Gradients arrive as
/// (name, tensor) pairs in [`MixVprParams::named_tensors`] order; velocity
/// buffers persist inside `state`.
pub fn sgd_step(
    params: &mut MixVprParams<f32>,
    grads: &[(String, Tensor<f32>)],
    lr: f64,
    state: &mut OptimState,
) -> Result<()> {
    state.validate()?;
    let mut named = params.named_tensors_mut();
    if named.len() != grads.len() {
        return Err(Error::Contract(format!(
            "{} gradients for {} parameters",
            grads.len(),
            named.len()
        )));
    }
    let m = state.momentum as f32;
    let wd = state.weight_decay as f32;
    let lr = lr as f32;
    for ((name, theta), (gname, grad)) in named.iter_mut().zip(grads) {
        if name != gname {
            return Err(Error::Contract(format!(
                "gradient order mismatch: expected {name:?}, got {gname:?}"
            )));
        }
        if grad.dims() != theta.dims() {
            return Err(Error::shape(
                "sgd_step",
                format!("gradient for {name:?} has dims {:?}, parameter {:?}", grad.dims(), theta.dims()),
            ));
        }
        if !grad.all_finite() {
            return Err(Error::NonFinite(format!(
                "gradient for {name:?} is non-finite; training halted"
            )));
        }
        let velocity = state
            .velocities
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(theta.dims().to_vec()));
        for ((v, &g), t) in velocity
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(theta.data_mut())
        {
            *v = m * *v + g + wd * *t;
            *t -= lr * *v;
        }
    }
    Ok(())
}

impl<T: Scalar> MixVprParams<T> {
    /// Mutable twin of [`MixVprParams::named_tensors`], same order.
    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::with_capacity(6 * self.blocks.len() + 4);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{i}.gamma"), &mut b.gamma));
            out.push((format!("block{i}.beta"), &mut b.beta));
            out.push((format!("block{i}.w1"), &mut b.w1));
            out.push((format!("block{i}.b1"), &mut b.b1));
            out.push((format!("block{i}.w2"), &mut b.w2));
            out.push((format!("block{i}.b2"), &mut b.b2));
        }
        out.push(("head.w_d".into(), &mut self.head.w_d));
        out.push(("head.b_d".into(), &mut self.head.b_d));
        out.push(("head.w_r".into(), &mut self.head.w_r));
        out.push(("head.b_r".into(), &mut self.head.b_r));
        out
    }
}

// ── Training configuration file ─────────────────────────────────────

/// Flat `key=value` training configuration. Recognized keys:
/// `seed, P, K, lr, momentum, wd, epochs, alpha, beta, lambda, epsilon,
/// L, c, h, w, d, r, mlp_ratio`; anything else is an error. Defaults are
/// the full-scale recipe.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch: BatchSpec,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub loss: MsLossConfig,
    pub model: MixVprConfig,
}

impl PartialEq for BatchSpec {
    fn eq(&self, other: &Self) -> bool {
        self.places_per_batch == other.places_per_batch
            && self.views_per_place == other.views_per_place
    }
}

impl PartialEq for MsLossConfig {
    fn eq(&self, other: &Self) -> bool {
        (self.alpha, self.beta, self.lambda, self.epsilon)
            == (other.alpha, other.beta, other.lambda, other.epsilon)
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            batch: BatchSpec::default(),
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 0.001,
            epochs: 30,
            loss: MsLossConfig::default(),
            model: MixVprConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (line, key, value) in crate::aggregator::parse_flat_kv(text)? {
            let bad = |what: &str| Error::Parse {
                line,
                msg: format!("expected {what} for {key}, got {value:?}"),
            };
            let as_usize = || value.parse::<usize>().map_err(|_| bad("a non-negative integer"));
            let as_u64 = || value.parse::<u64>().map_err(|_| bad("a non-negative integer"));
            let as_f64 = || value.parse::<f64>().map_err(|_| bad("a real"));
            match key.as_str() {
                "seed" => cfg.seed = as_u64()?,
                "P" => cfg.batch.places_per_batch = as_usize()?,
                "K" => cfg.batch.views_per_place = as_usize()?,
                "lr" => cfg.lr = as_f64()?,
                "momentum" => cfg.momentum = as_f64()?,
                "wd" => cfg.weight_decay = as_f64()?,
                "epochs" => cfg.epochs = as_usize()?,
                "alpha" => cfg.loss.alpha = as_f64()?,
                "beta" => cfg.loss.beta = as_f64()?,
                "lambda" => cfg.loss.lambda = as_f64()?,
                "epsilon" => cfg.loss.epsilon = as_f64()?,
                "L" => cfg.model.num_blocks = as_usize()?,
                "c" => cfg.model.channels = as_usize()?,
                "h" => cfg.model.height = as_usize()?,
                "w" => cfg.model.width = as_usize()?,
                "d" => cfg.model.out_channels = as_usize()?,
                "r" => cfg.model.out_rows = as_usize()?,
                "mlp_ratio" => cfg.model.mlp_ratio = as_f64()?,
                other => {
                    return Err(Error::Parse {
                        line,
                        msg: format!("unknown training config key {other:?}"),
                    })
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        format!(
            "seed={}\nP={}\nK={}\nlr={}\nmomentum={}\nwd={}\nepochs={}\nalpha={}\nbeta={}\nlambda={}\nepsilon={}\nL={}\nc={}\nh={}\nw={}\nd={}\nr={}\nmlp_ratio={}\n",
            self.seed,
            self.batch.places_per_batch,
            self.batch.views_per_place,
            self.lr,
            self.momentum,
            self.weight_decay,
            self.epochs,
            self.loss.alpha,
            self.loss.beta,
            self.loss.lambda,
            self.loss.epsilon,
            self.model.num_blocks,
            self.model.channels,
            self.model.height,
            self.model.width,
            self.model.out_channels,
            self.model.out_rows,
            self.model.mlp_ratio
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.batch.validate()?;
        self.loss.validate()?;
        self.model.validate()?;
        self.optim_state().validate()
    }

    /// Optimizer state with this config's rate/momentum/decay and the
    /// standard step schedule.
    pub fn optim_state(&self) -> OptimState {
        OptimState {
            lr0: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            max_epochs: self.epochs,
            ..OptimState::default()
        }
    }
}

// ── Fit loop ────────────────────────────────────────────────────────

/// Loop controls beyond the optimizer itself. `max_steps` caps total
/// optimization steps across epochs (for fixed step budgets); output
/// paths are optional side effects.
#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    pub max_steps: Option<usize>,
    pub checkpoint_path: Option<PathBuf>,
    pub curve_path: Option<PathBuf>,
}

/// Training outcome: final parameters, the per-step loss curve
/// (epoch, global step, loss), and per-epoch mean losses.
#[derive(Clone, Debug)]
pub struct FitResult {
    pub params: MixVprParams<f32>,
    pub curve: Vec<(usize, usize, f64)>,
    pub epoch_mean_loss: Vec<f64>,
}

impl FitResult {
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("epoch,step,loss\n");
        for (epoch, step, loss) in &self.curve {
            out.push_str(&format!("{epoch},{step},{loss}\n"));
        }
        out
    }
}

/// Runs `optim.max_epochs` epochs of sample → aggregate → loss →
/// backward → step. Batches per epoch is `floor(eligible places / P)`,
/// at least 1. All input tensors are loaded and flattened up front. A
/// non-finite loss aborts with the offending epoch/step; gradients are
/// checked inside [`sgd_step`].
pub fn fit(
    manifest: &Manifest,
    model_cfg: &MixVprConfig,
    batch: &BatchSpec,
    loss_cfg: &MsLossConfig,
    optim: &mut OptimState,
    seed: u64,
    opts: &FitOptions,
) -> Result<FitResult> {
    model_cfg.validate()?;
    batch.validate()?;
    loss_cfg.validate()?;
    optim.validate()?;

    let mut params = MixVprParams::init(model_cfg, seed)?;

    // Cache every referenced tensor, already flattened to [c × n].
    let expected = [model_cfg.channels, model_cfg.height, model_cfg.width];
    let mut cache: Vec<Tensor<f32>> = Vec::with_capacity(manifest.len());
    for record in &manifest.records {
        let maps = data_io::read_tensor(&manifest.tensor_path(record))?;
        if maps.dims() != expected {
            return Err(Error::shape(
                "fit",
                format!(
                    "tensor for {:?} has dims {:?}, model config implies {:?}",
                    record.id,
                    maps.dims(),
                    expected
                ),
            ));
        }
        cache.push(flatten_maps(&maps)?);
    }

    let eligible = manifest
        .places()
        .values()
        .filter(|idxs| idxs.len() >= batch.views_per_place)
        .count();
    let steps_per_epoch = (eligible / batch.places_per_batch).max(1);

    // Distinct stream from parameter init, which consumed its own
    // generator seeded with the same value.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15);

    let mut curve = Vec::new();
    let mut epoch_mean_loss = Vec::new();
    let mut global_step = 0usize;
    'epochs: for epoch in 0..optim.max_epochs {
        let lr = lr_schedule(optim, epoch);
        let mut epoch_losses = Vec::with_capacity(steps_per_epoch);
        for _ in 0..steps_per_epoch {
            if opts.max_steps.is_some_and(|cap| global_step >= cap) {
                break 'epochs;
            }
            let samples = sample_batch(manifest, batch, &mut rng)?;
            let mut g = Graph::<f32>::new();
            let nodes = register_params(&mut g, &params);
            let mut descriptors = Vec::with_capacity(samples.len());
            let mut labels = Vec::with_capacity(samples.len());
            for &(record_idx, label) in &samples {
                let x = g.leaf(cache[record_idx].clone());
                descriptors.push(aggregate_graph(&mut g, &nodes, x)?);
                labels.push(label);
            }
            let loss_node = ms_loss_graph(&mut g, &descriptors, &labels, loss_cfg)?;
            let loss = g.value(loss_node).scalar_value()?.to_f64();
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss became {loss} at epoch {epoch}, step {global_step}"
                )));
            }
            let mut grads = g.backward(loss_node)?;
            let named: Vec<(String, Tensor<f32>)> = params
                .named_tensors()
                .iter()
                .zip(param_node_ids(&nodes))
                .map(|((name, tensor), id)| {
                    let grad = grads
                        .take(id)
                        .unwrap_or_else(|| Tensor::zeros(tensor.dims().to_vec()));
                    (name.clone(), grad)
                })
                .collect();
            sgd_step(&mut params, &named, lr, optim)?;
            curve.push((epoch, global_step, loss));
            epoch_losses.push(loss);
            global_step += 1;
        }
        if !epoch_losses.is_empty() {
            epoch_mean_loss.push(epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64);
            log::info!(
                "epoch {epoch}: mean loss {:.6}, lr {lr:.6}",
                epoch_mean_loss.last().expect("just pushed")
            );
        }
    }

    let result = FitResult {
        params,
        curve,
        epoch_mean_loss,
    };
    if let Some(path) = &opts.curve_path {
        std::fs::write(path, result.curve_csv())?;
    }
    if let Some(path) = &opts.checkpoint_path {
        data_io::save_model(path, &result.params)?;
    }
    Ok(result)
}

/// Node ids in the canonical parameter order (matching
/// [`MixVprParams::named_tensors`]).
fn param_node_ids(nodes: &crate::aggregator::ModelNodes) -> Vec<NodeId> {
    let mut out = Vec::with_capacity(6 * nodes.blocks.len() + 4);
    for b in &nodes.blocks {
        out.extend([b.gamma, b.beta, b.w1, b.b1, b.w2, b.b2]);
    }
    out.extend([nodes.head.w_d, nodes.head.b_d, nodes.head.w_r, nodes.head.b_r]);
    out
}
