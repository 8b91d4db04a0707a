//! Training loop: per-epoch subset sampling, mini-batch optimization,
//! periodic validation with learning-rate decay, checkpointing and a
//! CSV training log.

use std::path::Path;

use crate::autodiff::{adam_step, Graph, Phase};
use crate::data::Dataset;
use crate::decode::greedy_decode;
use crate::evalbench::optimality_gap;
use crate::geom::{tour_length, Tour, TspInstance};
use crate::model::{save_checkpoint, Gcn, GcnConfig};
use crate::rng::SplitMix64;
use crate::{Error, Result};

/// Validation forward passes run in batches of this size.
const VAL_BATCH: usize = 20;

/// Schedule and sampling knobs for one training run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Records sampled per epoch (with replacement when the dataset is
    /// smaller).
    pub subset_per_epoch: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    /// Divisor applied when validation stalls.
    pub decay_factor: f64,
    pub val_interval_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            subset_per_epoch: 10_000,
            batch_size: 20,
            lr_initial: 0.001,
            decay_factor: 1.01,
            val_interval_epochs: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0
            || self.subset_per_epoch == 0
            || self.batch_size == 0
            || self.val_interval_epochs == 0
        {
            return Err(Error::Config("all training counts must be positive".into()));
        }
        if self.lr_initial <= 0.0 {
            return Err(Error::Config(format!(
                "initial learning rate must be positive, got {}",
                self.lr_initial
            )));
        }
        if self.decay_factor <= 1.0 {
            return Err(Error::Config(format!(
                "decay factor must exceed 1, got {}",
                self.decay_factor
            )));
        }
        Ok(())
    }
}

/// Everything the `train` CLI reads from its key=value config file:
/// the schedule, the architecture and the held-out fraction.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainFileConfig {
    pub train: TrainConfig,
    pub arch: GcnConfig,
    /// Fraction of the training file held out as the validation set
    /// when no separate file is given.
    pub val_fraction: f64,
}

impl Default for TrainFileConfig {
    fn default() -> Self {
        TrainFileConfig {
            train: TrainConfig::default(),
            arch: GcnConfig::desk_scale(),
            val_fraction: 0.1,
        }
    }
}

/// Parse a `key=value` config file; `#` starts a comment. Unknown keys
/// are errors so typos do not silently train the wrong model.
pub fn parse_config_file(text: &str) -> Result<TrainFileConfig> {
    let mut cfg = TrainFileConfig::default();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let (key, value) = line.split_once('=').ok_or(Error::Parse {
            line: line_no,
            message: format!("expected key=value, got '{line}'"),
        })?;
        let (key, value) = (key.trim(), value.trim());
        let bad = |what: &str| Error::Parse {
            line: line_no,
            message: format!("bad {what} value '{value}'"),
        };
        match key {
            "epochs" => cfg.train.epochs = value.parse().map_err(|_| bad("epochs"))?,
            "subset_per_epoch" => {
                cfg.train.subset_per_epoch = value.parse().map_err(|_| bad("subset_per_epoch"))?
            }
            "batch_size" => cfg.train.batch_size = value.parse().map_err(|_| bad("batch_size"))?,
            "lr_initial" => cfg.train.lr_initial = value.parse().map_err(|_| bad("lr_initial"))?,
            "decay_factor" => {
                cfg.train.decay_factor = value.parse().map_err(|_| bad("decay_factor"))?
            }
            "val_interval_epochs" => {
                cfg.train.val_interval_epochs =
                    value.parse().map_err(|_| bad("val_interval_epochs"))?
            }
            "seed" => cfg.train.seed = value.parse().map_err(|_| bad("seed"))?,
            "l_conv" => cfg.arch.l_conv = value.parse().map_err(|_| bad("l_conv"))?,
            "l_mlp" => cfg.arch.l_mlp = value.parse().map_err(|_| bad("l_mlp"))?,
            "h" => cfg.arch.h = value.parse().map_err(|_| bad("h"))?,
            "k" => cfg.arch.k = value.parse().map_err(|_| bad("k"))?,
            "epsilon_gate" => {
                cfg.arch.epsilon_gate = value.parse().map_err(|_| bad("epsilon_gate"))?
            }
            "val_fraction" => cfg.val_fraction = value.parse().map_err(|_| bad("val_fraction"))?,
            other => {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("unknown config key '{other}'"),
                })
            }
        }
    }
    cfg.train.validate()?;
    cfg.arch.validate()?;
    if !(0.0..1.0).contains(&cfg.val_fraction) {
        return Err(Error::Config(format!(
            "val_fraction must lie in [0, 1), got {}",
            cfg.val_fraction
        )));
    }
    Ok(cfg)
}

pub fn format_config_file(cfg: &TrainFileConfig) -> String {
    format!(
        "epochs={}\nsubset_per_epoch={}\nbatch_size={}\nlr_initial={}\ndecay_factor={}\n\
         val_interval_epochs={}\nseed={}\nl_conv={}\nl_mlp={}\nh={}\nk={}\nepsilon_gate={:e}\n\
         val_fraction={}\n",
        cfg.train.epochs,
        cfg.train.subset_per_epoch,
        cfg.train.batch_size,
        cfg.train.lr_initial,
        cfg.train.decay_factor,
        cfg.train.val_interval_epochs,
        cfg.train.seed,
        cfg.arch.l_conv,
        cfg.arch.l_mlp,
        cfg.arch.h,
        cfg.arch.k,
        cfg.arch.epsilon_gate,
        cfg.val_fraction,
    )
}

/// One epoch: sample `subset_per_epoch` records (without replacement
/// when the dataset is large enough), run forward / loss / backward /
/// Adam per mini-batch, return the mean loss.
pub fn train_epoch(
    model: &mut Gcn<f32>,
    dataset: &Dataset,
    config: &TrainConfig,
    lr: f64,
    rng: &mut SplitMix64,
) -> Result<f32> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
    }
    let len = dataset.len();
    let indices: Vec<usize> = if len >= config.subset_per_epoch {
        rng.sample_indices(len, config.subset_per_epoch)
    } else {
        (0..config.subset_per_epoch)
            .map(|_| rng.next_below(len as u64) as usize)
            .collect()
    };
    let mut weighted = 0.0f64;
    let mut count = 0usize;
    for chunk in indices.chunks(config.batch_size) {
        let instances: Vec<&TspInstance> =
            chunk.iter().map(|&i| &dataset.records[i].0).collect();
        let tours: Vec<&Tour> = chunk.iter().map(|&i| &dataset.records[i].1).collect();
        let mut g = Graph::new();
        let logits = model.forward(&mut g, &instances, Phase::Train)?;
        let loss = model.loss(&mut g, logits, &tours)?;
        g.backward(loss)?;
        g.write_grads(model.store_mut())?;
        adam_step(model.store_mut(), lr)?;
        weighted += g.scalar_value(loss) as f64 * chunk.len() as f64;
        count += chunk.len();
    }
    Ok((weighted / count as f64) as f32)
}

/// Evaluation-mode mean loss and mean greedy optimality gap (percent)
/// against the stored optimal tours.
pub fn validate(model: &Gcn<f32>, val: &Dataset) -> Result<(f32, f64)> {
    if val.is_empty() {
        return Err(Error::InvalidArgument("cannot validate on an empty dataset".into()));
    }
    let mut weighted = 0.0f64;
    let mut gap_sum = 0.0f64;
    for chunk in val.records.chunks(VAL_BATCH) {
        let instances: Vec<&TspInstance> = chunk.iter().map(|(i, _)| i).collect();
        let tours: Vec<&Tour> = chunk.iter().map(|(_, t)| t).collect();
        let mut g = Graph::new();
        let logits = model.forward_eval(&mut g, &instances)?;
        let loss = model.loss(&mut g, logits, &tours)?;
        weighted += g.scalar_value(loss) as f64 * chunk.len() as f64;
        // heat-maps from the same logits
        let probs = g.softmax(logits)?;
        let p1 = g.gather(probs, 1)?;
        let n = val.n;
        let vals = g.value(p1);
        for (b, (inst, opt)) in chunk.iter().enumerate() {
            let slice = &vals[b * n * n..(b + 1) * n * n];
            let hm = crate::model::HeatMap::new(
                n,
                slice.iter().map(|&p| (p as f64).clamp(0.0, 1.0)).collect(),
            )?;
            let tour = greedy_decode(&hm, 0)?;
            let pred = tour_length(inst, &tour)?;
            let best = tour_length(inst, opt)?;
            gap_sum += optimality_gap(pred, best)?;
        }
    }
    let count = val.len() as f64;
    Ok(((weighted / count) as f32, gap_sum / count))
}

/// Decay rule: when the current validation loss failed to drop below
/// 99% of the previous one, divide the learning rate by `decay_factor`.
pub fn maybe_decay_lr(
    current_val_loss: f64,
    previous_val_loss: f64,
    lr: f64,
    decay_factor: f64,
) -> f64 {
    if current_val_loss >= 0.99 * previous_val_loss {
        lr / decay_factor
    } else {
        lr
    }
}

pub const TRAIN_LOG_CSV_HEADER: &str = "epoch,mean_loss,val_loss,val_gap,lr";

#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f32,
    pub val_loss: Option<f32>,
    pub val_gap_pct: Option<f64>,
    pub lr: f64,
}

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{},{},{:.8}",
            self.epoch,
            self.mean_loss,
            self.val_loss.map(|v| format!("{v:.6}")).unwrap_or_default(),
            self.val_gap_pct.map(|v| format!("{v:.4}")).unwrap_or_default(),
            self.lr
        )
    }
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub epochs: Vec<EpochLog>,
    pub best_val_loss: Option<f32>,
    pub final_val_gap_pct: Option<f64>,
}

/// Output locations for [`fit`]; any of them may be absent.
#[derive(Debug, Default, Clone)]
pub struct FitSinks<'a> {
    /// Written at every validation event (latest weights).
    pub checkpoint: Option<&'a Path>,
    /// Written whenever validation loss improves.
    pub best_checkpoint: Option<&'a Path>,
    /// CSV training log.
    pub log: Option<&'a Path>,
}

/// Full training run. Validation (and checkpointing) happens every
/// `val_interval_epochs` epochs and once more after the final epoch;
/// the decay rule compares consecutive validation events.
pub fn fit(
    model: &mut Gcn<f32>,
    train_ds: &Dataset,
    val_ds: &Dataset,
    config: &TrainConfig,
    sinks: &FitSinks<'_>,
) -> Result<FitReport> {
    config.validate()?;
    let mut rng = SplitMix64::new(config.seed);
    let mut lr = config.lr_initial;
    let mut prev_val: Option<f32> = None;
    let mut best_val: Option<f32> = None;
    let mut final_gap = None;
    let mut logs = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let mean_loss = train_epoch(model, train_ds, config, lr, &mut rng)?;
        let mut val_loss = None;
        let mut val_gap = None;
        let on_interval = epoch % config.val_interval_epochs == 0;
        if on_interval || epoch == config.epochs {
            let (vl, vg) = validate(model, val_ds)?;
            val_loss = Some(vl);
            val_gap = Some(vg);
            final_gap = Some(vg);
            if on_interval {
                if let Some(prev) = prev_val {
                    lr = maybe_decay_lr(vl as f64, prev as f64, lr, config.decay_factor);
                }
                prev_val = Some(vl);
            }
            if let Some(path) = sinks.checkpoint {
                save_checkpoint(model, path)?;
            }
            if best_val.is_none_or(|b| vl < b) {
                best_val = Some(vl);
                if let Some(path) = sinks.best_checkpoint {
                    save_checkpoint(model, path)?;
                }
            }
        }
        logs.push(EpochLog { epoch, mean_loss, val_loss, val_gap_pct: val_gap, lr });
    }
    if let Some(path) = sinks.log {
        let mut text = String::from(TRAIN_LOG_CSV_HEADER);
        text.push('\n');
        for log in &logs {
            text.push_str(&log.csv_row());
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(FitReport { epochs: logs, best_val_loss: best_val, final_val_gap_pct: final_gap })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SolverKind, Split};
    use crate::model::load_checkpoint;

    fn tiny_arch() -> GcnConfig {
        GcnConfig { l_conv: 2, l_mlp: 2, h: 16, k: 5, epsilon_gate: 1e-20 }
    }

    fn tiny_train(epochs: usize, subset: usize, batch: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            subset_per_epoch: subset,
            batch_size: batch,
            lr_initial: 0.001,
            decay_factor: 1.01,
            val_interval_epochs: 5,
            seed: 3,
        }
    }

    #[test]
    fn decay_rule_matches_the_schedule() {
        let lr = 0.001;
        let decayed = maybe_decay_lr(0.995, 1.0, lr, 1.01);
        assert!((decayed - lr / 1.01).abs() < 1e-12);
        assert_eq!(maybe_decay_lr(0.98, 1.0, lr, 1.01), lr);
        // boundary: a drop of exactly 1% still decays
        let boundary = maybe_decay_lr(0.99, 1.0, lr, 1.01);
        assert!((boundary - lr / 1.01).abs() < 1e-12);
    }

    #[test]
    fn identical_seeds_give_identical_trajectories() {
        let ds = generate_dataset(6, 20, 5, SolverKind::Brute, Split::Train).unwrap();
        let run = || -> Vec<u32> {
            let mut model = Gcn::<f32>::new(tiny_arch(), 11).unwrap();
            let cfg = tiny_train(2, 20, 5);
            let mut rng = SplitMix64::new(cfg.seed);
            (0..cfg.epochs)
                .map(|_| train_epoch(&mut model, &ds, &cfg, cfg.lr_initial, &mut rng).unwrap())
                .map(f32::to_bits)
                .collect()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn smoke_training_reduces_loss_on_small_tsp10() {
        let ds = generate_dataset(10, 50, 21, SolverKind::HeldKarp, Split::Train).unwrap();
        let mut model = Gcn::<f32>::new(tiny_arch(), 7).unwrap();
        let cfg = TrainConfig {
            epochs: 30,
            subset_per_epoch: 50,
            batch_size: 10,
            seed: 5,
            ..TrainConfig::default()
        };
        let mut rng = SplitMix64::new(cfg.seed);
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..cfg.epochs {
            last = train_epoch(&mut model, &ds, &cfg, cfg.lr_initial, &mut rng).unwrap();
            first.get_or_insert(last);
        }
        assert!(
            last < first.unwrap(),
            "loss went {} -> {last} over 30 epochs",
            first.unwrap()
        );
    }

    #[test]
    fn duplicated_instance_batches_share_their_loss() {
        let ds = generate_dataset(8, 2, 9, SolverKind::Brute, Split::Train).unwrap();
        let (inst, tour) = &ds.records[0];
        let loss_of = |copies: usize| -> f32 {
            let mut model = Gcn::<f32>::new(tiny_arch(), 13).unwrap();
            let instances: Vec<&TspInstance> = std::iter::repeat_n(inst, copies).collect();
            let tours: Vec<&Tour> = std::iter::repeat_n(tour, copies).collect();
            let mut g = Graph::new();
            let logits = model.forward(&mut g, &instances, Phase::Train).unwrap();
            let loss = model.loss(&mut g, logits, &tours).unwrap();
            g.scalar_value(loss)
        };
        // duplicating an instance must not change the per-instance mean
        // (up to f32 summation order)
        let single = loss_of(1);
        for copies in [2, 3, 4] {
            let dup = loss_of(copies);
            assert!(
                (dup - single).abs() <= 1e-6 * single.abs(),
                "{copies} copies: {dup} vs {single}"
            );
        }
    }

    #[test]
    fn validation_is_deterministic_and_nonnegative() {
        let ds = generate_dataset(8, 16, 17, SolverKind::Brute, Split::Val).unwrap();
        let model = Gcn::<f32>::new(tiny_arch(), 19).unwrap();
        let (l1, g1) = validate(&model, &ds).unwrap();
        let (l2, g2) = validate(&model, &ds).unwrap();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(g1.to_bits(), g2.to_bits());
        assert!(g1 >= 0.0 && g1.is_finite());
    }

    #[test]
    fn perfect_prediction_stub_scores_zero_gap() {
        // a dataset whose "model" is replaced by ground-truth heat-maps:
        // decode each stored tour's own adjacency and measure the gap
        let ds = generate_dataset(7, 10, 23, SolverKind::Brute, Split::Val).unwrap();
        for (inst, opt) in &ds.records {
            let hm = crate::model::HeatMap::from_tour(opt);
            let tour = greedy_decode(&hm, 0).unwrap();
            let gap = optimality_gap(
                tour_length(inst, &tour).unwrap(),
                tour_length(inst, opt).unwrap(),
            )
            .unwrap();
            assert!(gap.abs() < 1e-9);
        }
    }

    #[test]
    fn frozen_batch_loss_decreases_for_five_steps() {
        let ds = generate_dataset(8, 10, 29, SolverKind::Brute, Split::Train).unwrap();
        let mut model = Gcn::<f32>::new(tiny_arch(), 31).unwrap();
        let instances: Vec<&TspInstance> = ds.records.iter().map(|(i, _)| i).collect();
        let tours: Vec<&Tour> = ds.records.iter().map(|(_, t)| t).collect();
        let mut losses = Vec::new();
        for _ in 0..5 {
            let mut g = Graph::new();
            let logits = model.forward(&mut g, &instances, Phase::Train).unwrap();
            let loss = model.loss(&mut g, logits, &tours).unwrap();
            g.backward(loss).unwrap();
            g.write_grads(model.store_mut()).unwrap();
            adam_step(model.store_mut(), 1e-4).unwrap();
            losses.push(g.scalar_value(loss));
        }
        for w in losses.windows(2) {
            assert!(w[1] < w[0], "losses not monotone: {losses:?}");
        }
    }

    #[test]
    fn fit_checkpoints_reload_to_identical_validation() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("model.ckpt");
        let log = dir.path().join("log.csv");
        let train_ds = generate_dataset(7, 30, 37, SolverKind::Brute, Split::Train).unwrap();
        let val_ds = generate_dataset(7, 10, 41, SolverKind::Brute, Split::Val).unwrap();
        let mut model = Gcn::<f32>::new(tiny_arch(), 43).unwrap();
        let cfg = TrainConfig {
            epochs: 6,
            subset_per_epoch: 30,
            batch_size: 10,
            val_interval_epochs: 3,
            seed: 47,
            ..TrainConfig::default()
        };
        let sinks = FitSinks {
            checkpoint: Some(&ckpt),
            best_checkpoint: None,
            log: Some(&log),
        };
        let report = fit(&mut model, &train_ds, &val_ds, &cfg, &sinks).unwrap();
        assert_eq!(report.epochs.len(), 6);
        // lr never increases
        for w in report.epochs.windows(2) {
            assert!(w[1].lr <= w[0].lr);
        }
        let (direct, _) = validate(&model, &val_ds).unwrap();
        let reloaded = load_checkpoint(&ckpt).unwrap();
        let (from_ckpt, _) = validate(&reloaded, &val_ds).unwrap();
        assert_eq!(direct.to_bits(), from_ckpt.to_bits());
        let log_text = std::fs::read_to_string(&log).unwrap();
        assert!(log_text.starts_with(TRAIN_LOG_CSV_HEADER));
        assert_eq!(log_text.lines().count(), 7);
    }

    #[test]
    fn config_file_round_trip_and_errors() {
        let cfg = TrainFileConfig {
            train: TrainConfig { epochs: 12, seed: 9, ..TrainConfig::default() },
            arch: GcnConfig { l_conv: 4, ..GcnConfig::desk_scale() },
            val_fraction: 0.2,
        };
        let text = format_config_file(&cfg);
        let back = parse_config_file(&text).unwrap();
        assert_eq!(back, cfg);

        assert!(parse_config_file("epochs=abc").is_err());
        match parse_config_file("epochs=3\nbogus_key=1") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        // comments and blanks are fine
        let ok = parse_config_file("# schedule\nepochs=4\n\nseed=2 # inline\n").unwrap();
        assert_eq!(ok.train.epochs, 4);
        assert_eq!(ok.train.seed, 2);
    }
}
