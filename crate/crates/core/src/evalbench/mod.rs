//! Metrics, solver comparison harness, beam-width / capacity sweeps and
//! SVG figure export.

pub mod svg;

pub use svg::{export_figure, render_figure};

use std::time::Instant;

use rayon::prelude::*;

use crate::data::Dataset;
use crate::decode::DecoderKind;
use crate::geom::{tour_length, Tour, TspInstance};
use crate::model::{Gcn, GcnConfig, HeatMap};
use crate::oracle::{self, InsertionRule};
use crate::train::{fit, FitSinks, TrainConfig};
use crate::{Error, Result};

/// Instances per evaluation forward pass when a model method runs.
const EVAL_BATCH: usize = 20;

/// Stored tours count as the exact reference up to this size (the
/// raised Held-Karp cap used for dataset generation).
const EXACT_REFERENCE_MAX_N: usize = 20;

/// Percentage excess of a predicted length over the reference length.
pub fn optimality_gap(pred_len: f64, opt_len: f64) -> Result<f64> {
    if opt_len <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "reference tour length must be positive, got {opt_len}"
        )));
    }
    Ok((pred_len / opt_len - 1.0) * 100.0)
}

/// What the gap column is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GapReference {
    /// Stored exact-solver tours.
    Exact,
    /// Farthest insertion + 2-opt, recomputed per instance (sizes with
    /// no exact oracle).
    Heuristic,
}

impl GapReference {
    pub fn gap_column(self) -> &'static str {
        match self {
            GapReference::Exact => "mean_gap_pct",
            GapReference::Heuristic => "mean_gap_vs_fi2opt_pct",
        }
    }
}

/// A benchmarkable solving method.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodSpec {
    /// Re-solve each instance with Held-Karp.
    Exact,
    NearestNeighbor,
    NearestInsertion,
    RandomInsertion,
    FarthestInsertion,
    /// Nearest neighbor + 2-opt.
    NnTwoOpt,
    /// Farthest insertion + 2-opt.
    FiTwoOpt,
    /// Model heat-map + greedy decoding.
    Greedy,
    /// Model heat-map + beam search (highest probability).
    Beam { width: usize },
    /// Model heat-map + beam search (shortest tour).
    BeamShortest { width: usize },
}

impl MethodSpec {
    /// Parse a CLI method name; `beam_width` feeds the beam variants.
    pub fn parse(name: &str, beam_width: usize) -> Result<Self> {
        match name {
            "exact" => Ok(MethodSpec::Exact),
            "nearest-neighbor" | "nn" => Ok(MethodSpec::NearestNeighbor),
            "nearest-insertion" => Ok(MethodSpec::NearestInsertion),
            "random-insertion" => Ok(MethodSpec::RandomInsertion),
            "farthest-insertion" => Ok(MethodSpec::FarthestInsertion),
            "nn-2opt" => Ok(MethodSpec::NnTwoOpt),
            "fi-2opt" => Ok(MethodSpec::FiTwoOpt),
            "greedy" => Ok(MethodSpec::Greedy),
            "beam" => Ok(MethodSpec::Beam { width: beam_width }),
            "beam-shortest" => Ok(MethodSpec::BeamShortest { width: beam_width }),
            other => Err(Error::InvalidArgument(format!(
                "unknown method '{other}' (expected exact|nearest-neighbor|nearest-insertion|\
                 random-insertion|farthest-insertion|nn-2opt|fi-2opt|greedy|beam|beam-shortest)"
            ))),
        }
    }

    pub fn needs_model(&self) -> bool {
        matches!(
            self,
            MethodSpec::Greedy | MethodSpec::Beam { .. } | MethodSpec::BeamShortest { .. }
        )
    }

    pub fn name(&self) -> String {
        match self {
            MethodSpec::Exact => "exact".into(),
            MethodSpec::NearestNeighbor => "nearest-neighbor".into(),
            MethodSpec::NearestInsertion => "nearest-insertion".into(),
            MethodSpec::RandomInsertion => "random-insertion".into(),
            MethodSpec::FarthestInsertion => "farthest-insertion".into(),
            MethodSpec::NnTwoOpt => "nn-2opt".into(),
            MethodSpec::FiTwoOpt => "fi-2opt".into(),
            MethodSpec::Greedy => "greedy".into(),
            MethodSpec::Beam { width } => format!("beam[b={width}]"),
            MethodSpec::BeamShortest { width } => format!("beam-shortest[b={width}]"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerInstance {
    pub len: f64,
    pub gap_pct: f64,
}

/// One benchmark result row.
#[derive(Debug, Clone)]
pub struct BenchRow {
    pub method: String,
    pub n: usize,
    pub count: usize,
    pub mean_len: f64,
    pub mean_gap_pct: f64,
    pub total_wall_ms: f64,
    pub threads: usize,
    pub gap_reference: GapReference,
    pub per_instance: Vec<PerInstance>,
}

impl BenchRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.4},{:.1},{}",
            self.method,
            self.n,
            self.count,
            self.mean_len,
            self.mean_gap_pct,
            self.total_wall_ms,
            self.threads
        )
    }
}

/// CSV text for a set of rows sharing one gap reference.
pub fn report_csv(rows: &[BenchRow]) -> Result<String> {
    let reference = rows.first().map_or(GapReference::Exact, |r| r.gap_reference);
    if rows.iter().any(|r| r.gap_reference != reference) {
        return Err(Error::InvalidArgument(
            "cannot mix gap references in one report".into(),
        ));
    }
    let mut text = format!(
        "method,n,count,mean_len,{},total_wall_ms,threads\n",
        reference.gap_column()
    );
    for row in rows {
        text.push_str(&row.csv_row());
        text.push('\n');
    }
    Ok(text)
}

fn heuristic_tour(spec: &MethodSpec, instance: &TspInstance, index: usize) -> Result<Tour> {
    match spec {
        MethodSpec::Exact => {
            oracle::solve_held_karp_capped(instance, EXACT_REFERENCE_MAX_N)
        }
        MethodSpec::NearestNeighbor => oracle::nearest_neighbor(instance, 0),
        MethodSpec::NearestInsertion => {
            oracle::insertion(instance, InsertionRule::Nearest, index as u64)
        }
        MethodSpec::RandomInsertion => {
            oracle::insertion(instance, InsertionRule::Random, index as u64)
        }
        MethodSpec::FarthestInsertion => {
            oracle::insertion(instance, InsertionRule::Farthest, index as u64)
        }
        MethodSpec::NnTwoOpt => {
            let start = oracle::nearest_neighbor(instance, 0)?;
            oracle::two_opt(instance, &start)
        }
        MethodSpec::FiTwoOpt => {
            let start = oracle::insertion(instance, InsertionRule::Farthest, index as u64)?;
            oracle::two_opt(instance, &start)
        }
        _ => Err(Error::InvalidArgument(format!(
            "{} is not a heuristic method",
            spec.name()
        ))),
    }
}

fn model_tours(
    model: &Gcn<f32>,
    decoder: DecoderKind,
    dataset: &Dataset,
) -> Result<Vec<Tour>> {
    let chunks: Vec<&[(TspInstance, Tour)]> = dataset.records.chunks(EVAL_BATCH).collect();
    let per_chunk: Vec<Vec<Tour>> = chunks
        .par_iter()
        .map(|chunk| -> Result<Vec<Tour>> {
            let instances: Vec<&TspInstance> = chunk.iter().map(|(i, _)| i).collect();
            let maps = model.heatmaps(&instances)?;
            maps.iter()
                .zip(&instances)
                .map(|(hm, inst)| decoder.decode(hm, inst, 0))
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per_chunk.into_iter().flatten().collect())
}

/// Reference lengths for the gap column: stored tours when the dataset
/// size admits an exact oracle, otherwise farthest insertion + 2-opt.
fn reference_lengths(dataset: &Dataset) -> Result<(Vec<f64>, GapReference)> {
    if dataset.n <= EXACT_REFERENCE_MAX_N {
        let lens = dataset
            .records
            .iter()
            .map(|(inst, tour)| tour_length(inst, tour))
            .collect::<Result<_>>()?;
        Ok((lens, GapReference::Exact))
    } else {
        let lens = dataset
            .records
            .par_iter()
            .enumerate()
            .map(|(idx, (inst, _))| {
                let t = oracle::insertion(inst, InsertionRule::Farthest, idx as u64)?;
                let t = oracle::two_opt(inst, &t)?;
                tour_length(inst, &t)
            })
            .collect::<Result<_>>()?;
        Ok((lens, GapReference::Heuristic))
    }
}

/// Run one method over a dataset on `threads` worker threads.
///
/// Tour construction is timed once around the whole set; per-instance
/// lengths and gaps land in the returned row. A model trained at a
/// different instance size is fine: generalization runs are expected.
pub fn benchmark(
    spec: &MethodSpec,
    model: Option<&Gcn<f32>>,
    dataset: &Dataset,
    threads: usize,
) -> Result<BenchRow> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("cannot benchmark an empty dataset".into()));
    }
    if spec.needs_model() && model.is_none() {
        return Err(Error::InvalidArgument(format!(
            "method {} needs a model checkpoint",
            spec.name()
        )));
    }
    let threads = threads.max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;

    let started = Instant::now();
    let tours: Vec<Tour> = match spec {
        MethodSpec::Greedy => {
            pool.install(|| model_tours(model.unwrap(), DecoderKind::Greedy, dataset))?
        }
        MethodSpec::Beam { width } => pool.install(|| {
            model_tours(model.unwrap(), DecoderKind::Beam { width: *width }, dataset)
        })?,
        MethodSpec::BeamShortest { width } => pool.install(|| {
            model_tours(
                model.unwrap(),
                DecoderKind::BeamShortest { width: *width },
                dataset,
            )
        })?,
        _ => pool.install(|| {
            dataset
                .records
                .par_iter()
                .enumerate()
                .map(|(idx, (inst, _))| heuristic_tour(spec, inst, idx))
                .collect::<Result<Vec<Tour>>>()
        })?,
    };
    let total_wall_ms = started.elapsed().as_secs_f64() * 1e3;

    let (reference, gap_reference) = pool.install(|| reference_lengths(dataset))?;
    let mut per_instance = Vec::with_capacity(tours.len());
    for ((tour, (inst, _)), opt_len) in tours.iter().zip(&dataset.records).zip(&reference) {
        let len = tour_length(inst, tour)?;
        per_instance.push(PerInstance { len, gap_pct: optimality_gap(len, *opt_len)? });
    }
    let count = per_instance.len();
    let mean_len = per_instance.iter().map(|p| p.len).sum::<f64>() / count as f64;
    let mean_gap_pct = per_instance.iter().map(|p| p.gap_pct).sum::<f64>() / count as f64;
    Ok(BenchRow {
        method: spec.name(),
        n: dataset.n,
        count,
        mean_len,
        mean_gap_pct,
        total_wall_ms,
        threads,
        gap_reference,
        per_instance,
    })
}

/// Sweep axis for [`sweep_beam_width`] / [`sweep_capacity`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    BeamWidth,
    LConv,
    Hidden,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beam_width" => Ok(SweepAxis::BeamWidth),
            "l_conv" => Ok(SweepAxis::LConv),
            "h" => Ok(SweepAxis::Hidden),
            other => Err(Error::InvalidArgument(format!(
                "unknown sweep axis '{other}' (expected beam_width|l_conv|h)"
            ))),
        }
    }
}

/// Decode the same heat-maps at several beam widths (shortest-tour
/// selection); one benchmark row per width.
pub fn sweep_beam_width(
    model: &Gcn<f32>,
    dataset: &Dataset,
    widths: &[usize],
    threads: usize,
) -> Result<Vec<BenchRow>> {
    if widths.is_empty() {
        return Ok(Vec::new());
    }
    let threads = threads.max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;

    // heat-maps are shaped by the model alone, so compute them once
    let maps: Vec<HeatMap> = pool.install(|| -> Result<Vec<HeatMap>> {
        let chunks: Vec<&[(TspInstance, Tour)]> = dataset.records.chunks(EVAL_BATCH).collect();
        let per_chunk: Vec<Vec<HeatMap>> = chunks
            .par_iter()
            .map(|chunk| {
                let instances: Vec<&TspInstance> = chunk.iter().map(|(i, _)| i).collect();
                model.heatmaps(&instances)
            })
            .collect::<Result<_>>()?;
        Ok(per_chunk.into_iter().flatten().collect())
    })?;
    let (reference, gap_reference) = pool.install(|| reference_lengths(dataset))?;

    let mut rows = Vec::with_capacity(widths.len());
    for &width in widths {
        let started = Instant::now();
        let tours: Vec<Tour> = pool.install(|| {
            maps.par_iter()
                .zip(&dataset.records)
                .map(|(hm, (inst, _))| {
                    DecoderKind::BeamShortest { width }.decode(hm, inst, 0)
                })
                .collect::<Result<_>>()
        })?;
        let total_wall_ms = started.elapsed().as_secs_f64() * 1e3;
        let mut per_instance = Vec::with_capacity(tours.len());
        for ((tour, (inst, _)), opt_len) in tours.iter().zip(&dataset.records).zip(&reference) {
            let len = tour_length(inst, tour)?;
            per_instance.push(PerInstance { len, gap_pct: optimality_gap(len, *opt_len)? });
        }
        let count = per_instance.len();
        rows.push(BenchRow {
            method: format!("beam-shortest[b={width}]"),
            n: dataset.n,
            count,
            mean_len: per_instance.iter().map(|p| p.len).sum::<f64>() / count as f64,
            mean_gap_pct: per_instance.iter().map(|p| p.gap_pct).sum::<f64>() / count as f64,
            total_wall_ms,
            threads,
            gap_reference,
            per_instance,
        });
    }
    Ok(rows)
}

/// Train one model per value of `l_conv` or `h` and benchmark each with
/// greedy decoding; one row per value.
#[allow(clippy::too_many_arguments)]
pub fn sweep_capacity(
    axis: SweepAxis,
    values: &[usize],
    base_arch: &GcnConfig,
    train_cfg: &TrainConfig,
    train_ds: &Dataset,
    eval_ds: &Dataset,
    threads: usize,
) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let arch = match axis {
            SweepAxis::LConv => GcnConfig { l_conv: value, ..*base_arch },
            SweepAxis::Hidden => GcnConfig { h: value, ..*base_arch },
            SweepAxis::BeamWidth => {
                return Err(Error::InvalidArgument(
                    "beam_width sweeps go through sweep_beam_width".into(),
                ))
            }
        };
        let mut model = Gcn::<f32>::new(arch, train_cfg.seed)?;
        fit(&mut model, train_ds, eval_ds, train_cfg, &FitSinks::default())?;
        let mut row = benchmark(&MethodSpec::Greedy, Some(&model), eval_ds, threads)?;
        row.method = match axis {
            SweepAxis::LConv => format!("greedy[l_conv={value}]"),
            SweepAxis::Hidden => format!("greedy[h={value}]"),
            SweepAxis::BeamWidth => unreachable!(),
        };
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SolverKind, Split};

    fn small_dataset() -> Dataset {
        generate_dataset(8, 24, 51, SolverKind::HeldKarp, Split::Test).unwrap()
    }

    #[test]
    fn gap_examples() {
        assert!((optimality_gap(4.2, 4.0).unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(optimality_gap(3.3, 3.3).unwrap(), 0.0);
        assert!(optimality_gap(1.0, 0.0).is_err());
        assert!(optimality_gap(1.0, -2.0).is_err());
    }

    #[test]
    fn exact_method_scores_zero_gap_on_its_own_dataset() {
        let ds = small_dataset();
        let row = benchmark(&MethodSpec::Exact, None, &ds, 2).unwrap();
        assert!(row.mean_gap_pct.abs() < 1e-9, "gap {}", row.mean_gap_pct);
        assert_eq!(row.count, 24);
        assert_eq!(row.gap_reference, GapReference::Exact);
    }

    #[test]
    fn thread_count_changes_timing_not_results() {
        let ds = small_dataset();
        let a = benchmark(&MethodSpec::NnTwoOpt, None, &ds, 1).unwrap();
        let b = benchmark(&MethodSpec::NnTwoOpt, None, &ds, 4).unwrap();
        assert_eq!(a.per_instance.len(), b.per_instance.len());
        for (x, y) in a.per_instance.iter().zip(&b.per_instance) {
            assert_eq!(x.len.to_bits(), y.len.to_bits());
            assert_eq!(x.gap_pct.to_bits(), y.gap_pct.to_bits());
        }
        assert_eq!(a.threads, 1);
        assert_eq!(b.threads, 4);
    }

    #[test]
    fn heuristics_stay_at_or_above_exact() {
        let ds = small_dataset();
        for spec in [
            MethodSpec::NearestNeighbor,
            MethodSpec::NearestInsertion,
            MethodSpec::RandomInsertion,
            MethodSpec::FarthestInsertion,
            MethodSpec::NnTwoOpt,
        ] {
            let row = benchmark(&spec, None, &ds, 2).unwrap();
            assert!(row.mean_gap_pct >= -1e-9, "{}: {}", row.method, row.mean_gap_pct);
        }
    }

    #[test]
    fn model_methods_require_a_checkpoint() {
        let ds = small_dataset();
        assert!(matches!(
            benchmark(&MethodSpec::Greedy, None, &ds, 1),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn model_runs_on_other_instance_sizes() {
        // trained-size mismatch is explicitly allowed
        let arch = GcnConfig { l_conv: 1, l_mlp: 2, h: 8, k: 20, epsilon_gate: 1e-20 };
        let model = Gcn::<f32>::new(arch, 3).unwrap();
        let ds = small_dataset(); // n = 8 while k says 20
        let row = benchmark(&MethodSpec::Greedy, Some(&model), &ds, 2).unwrap();
        assert_eq!(row.count, ds.len());
        assert!(row.mean_gap_pct >= 0.0);
    }

    #[test]
    fn beam_sweep_width_one_matches_greedy_row() {
        let arch = GcnConfig { l_conv: 1, l_mlp: 2, h: 8, k: 5, epsilon_gate: 1e-20 };
        let model = Gcn::<f32>::new(arch, 5).unwrap();
        let ds = small_dataset();
        let rows = sweep_beam_width(&model, &ds, &[1, 4], 2).unwrap();
        assert_eq!(rows.len(), 2);
        let greedy = benchmark(&MethodSpec::Greedy, Some(&model), &ds, 2).unwrap();
        assert_eq!(rows[0].mean_len.to_bits(), greedy.mean_len.to_bits());
        // wider beams with shortest-tour selection never hurt on average
        assert!(rows[1].mean_gap_pct <= rows[0].mean_gap_pct + 1e-9);
    }

    #[test]
    fn empty_sweep_produces_empty_series() {
        let arch = GcnConfig { l_conv: 1, l_mlp: 2, h: 8, k: 5, epsilon_gate: 1e-20 };
        let model = Gcn::<f32>::new(arch, 5).unwrap();
        let ds = small_dataset();
        assert!(sweep_beam_width(&model, &ds, &[], 1).unwrap().is_empty());
    }

    #[test]
    fn report_csv_shape() {
        let ds = small_dataset();
        let row = benchmark(&MethodSpec::FarthestInsertion, None, &ds, 2).unwrap();
        let csv = report_csv(&[row]).unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "method,n,count,mean_len,mean_gap_pct,total_wall_ms,threads"
        );
        let data = lines.next().unwrap();
        assert!(data.starts_with("farthest-insertion,8,24,"));
    }

    #[test]
    fn method_parsing() {
        assert_eq!(MethodSpec::parse("exact", 0).unwrap(), MethodSpec::Exact);
        assert_eq!(
            MethodSpec::parse("beam", 16).unwrap(),
            MethodSpec::Beam { width: 16 }
        );
        assert!(MethodSpec::parse("magic", 1).is_err());
        assert_eq!("l_conv".parse::<SweepAxis>().unwrap(), SweepAxis::LConv);
        assert!("nodes".parse::<SweepAxis>().is_err());
    }
}
