//! Dataset generation, text serialization and summary statistics.
//!
//! A dataset is a list of (instance, optimal tour) pairs for one fixed
//! problem size. Instances are sampled uniformly in the unit square
//! from per-index [`SplitMix64`](crate::rng::SplitMix64) substreams and
//! solved exactly, so the same `(n, count, seed)` triple reproduces the
//! same bytes on any machine and any thread count.
//!
//! On-disk format, one instance per line of UTF-8 text:
//!
//! ```text
//! x1 y1 x2 y2 ... xn yn output i1 i2 ... in i1
//! ```
//!
//! Coordinates carry 6 fixed decimals; the tour is 1-indexed and closed
//! (the first index is repeated at the end). Coordinates are quantized
//! to the same 6 decimals at generation time, which makes the format
//! lossless: parsing a written file reconstructs the exact in-memory
//! values.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::geom::{tour_length, Tour, TspInstance};
use crate::oracle;
use crate::rng::SplitMix64;
use crate::{Error, Result};

/// Which split a dataset plays in training. Not stored in the file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Exact solver used for ground-truth tours.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverKind {
    Brute,
    HeldKarp,
    /// Held-Karp with a raised size cap.
    HeldKarpCapped(usize),
}

impl SolverKind {
    fn solve(self, instance: &TspInstance) -> Result<Tour> {
        match self {
            SolverKind::Brute => oracle::solve_brute_force(instance),
            SolverKind::HeldKarp => oracle::solve_held_karp(instance),
            SolverKind::HeldKarpCapped(cap) => oracle::solve_held_karp_capped(instance, cap),
        }
    }
}

/// A set of (instance, exact optimal tour) pairs of one problem size.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub split: Split,
    pub n: usize,
    pub seed: u64,
    pub records: Vec<(TspInstance, Tour)>,
    /// Mean exact-solve wall time per instance, when the dataset was
    /// generated in this process. Not persisted by the text format.
    pub mean_solve_ms: Option<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Quantize to the 6 decimals the text format carries.
fn quantize(c: f64) -> f64 {
    (c * 1e6).round() / 1e6
}

/// Sample one instance: `n` i.i.d. uniform points in the unit square,
/// quantized to 6 decimals (the on-disk precision).
pub fn generate_instance(n: usize, rng: &mut SplitMix64) -> Result<TspInstance> {
    if n < 3 {
        return Err(Error::InvalidArgument(format!(
            "instance size must be >= 3, got {n}"
        )));
    }
    let points = (0..n)
        .map(|_| {
            let x = quantize(rng.next_f64());
            let y = quantize(rng.next_f64());
            [x, y]
        })
        .collect();
    TspInstance::new(points)
}

/// Generate `count` exact-solved instances. Instance `i` draws from
/// substream `(seed, i)`, so output is independent of thread count and
/// ordered by index.
pub fn generate_dataset(
    n: usize,
    count: usize,
    seed: u64,
    solver: SolverKind,
    split: Split,
) -> Result<Dataset> {
    // fail fast on a size/solver mismatch before burning time
    {
        let mut probe_rng = SplitMix64::substream(seed, 0);
        let probe = generate_instance(n, &mut probe_rng)?;
        solver.solve(&probe)?;
    }
    let solved: Vec<(TspInstance, Tour, f64)> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = SplitMix64::substream(seed, i as u64);
            let instance = generate_instance(n, &mut rng)?;
            let t0 = Instant::now();
            let tour = solver.solve(&instance)?;
            let ms = t0.elapsed().as_secs_f64() * 1e3;
            Ok((instance, tour, ms))
        })
        .collect::<Result<_>>()?;
    let mean_solve_ms = solved.iter().map(|(_, _, ms)| ms).sum::<f64>() / count.max(1) as f64;
    Ok(Dataset {
        split,
        n,
        seed,
        records: solved.into_iter().map(|(i, t, _)| (i, t)).collect(),
        mean_solve_ms: Some(mean_solve_ms),
    })
}

/// Dataset for sizes beyond the exact-solver cap: stored tours are the
/// best-known heuristic (farthest insertion + 2-opt), not exact optima.
/// Intended only for heuristic-vs-heuristic benchmarking.
pub fn generate_heuristic_dataset(
    n: usize,
    count: usize,
    seed: u64,
    split: Split,
) -> Result<Dataset> {
    let solved: Vec<(TspInstance, Tour, f64)> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = SplitMix64::substream(seed, i as u64);
            let instance = generate_instance(n, &mut rng)?;
            let t0 = Instant::now();
            let start = oracle::insertion(&instance, oracle::InsertionRule::Farthest, i as u64)?;
            let tour = oracle::two_opt(&instance, &start)?;
            let ms = t0.elapsed().as_secs_f64() * 1e3;
            Ok((instance, tour, ms))
        })
        .collect::<Result<_>>()?;
    let mean_solve_ms = solved.iter().map(|(_, _, ms)| ms).sum::<f64>() / count.max(1) as f64;
    Ok(Dataset {
        split,
        n,
        seed,
        records: solved.into_iter().map(|(i, t, _)| (i, t)).collect(),
        mean_solve_ms: Some(mean_solve_ms),
    })
}

/// Format one record as a dataset line (no trailing newline).
pub fn format_record(instance: &TspInstance, tour: &Tour) -> String {
    let mut line = String::with_capacity(instance.n() * 22 + 8);
    for p in instance.points() {
        let _ = write!(line, "{:.6} {:.6} ", p[0], p[1]);
    }
    line.push_str("output");
    for &v in tour.order() {
        let _ = write!(line, " {}", v + 1);
    }
    let _ = write!(line, " {}", tour.order()[0] + 1);
    line
}

pub fn write_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);
    for (instance, tour) in &dataset.records {
        writeln!(w, "{}", format_record(instance, tour))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

fn parse_error(line: usize, message: impl Into<String>) -> Error {
    Error::Parse { line, message: message.into() }
}

/// Parse one dataset line (1-based `line_no` only feeds error messages).
pub fn parse_record(line: &str, line_no: usize) -> Result<(TspInstance, Tour)> {
    let tokens: Vec<&str> = line.split_whitespace().collect();
    let sep = tokens
        .iter()
        .position(|&t| t == "output")
        .ok_or_else(|| parse_error(line_no, "missing 'output' separator"))?;
    if sep == 0 || sep % 2 != 0 {
        return Err(parse_error(line_no, format!("expected an even number of coordinates, got {sep}")));
    }
    let n = sep / 2;
    let mut points = Vec::with_capacity(n);
    for pair in tokens[..sep].chunks(2) {
        let x: f64 = pair[0]
            .parse()
            .map_err(|_| parse_error(line_no, format!("bad coordinate '{}'", pair[0])))?;
        let y: f64 = pair[1]
            .parse()
            .map_err(|_| parse_error(line_no, format!("bad coordinate '{}'", pair[1])))?;
        points.push([x, y]);
    }
    let tour_tokens = &tokens[sep + 1..];
    if tour_tokens.len() != n + 1 {
        return Err(parse_error(
            line_no,
            format!("expected {} tour indices (closed), got {}", n + 1, tour_tokens.len()),
        ));
    }
    let mut order = Vec::with_capacity(n);
    for t in &tour_tokens[..n] {
        let v: usize = t
            .parse()
            .map_err(|_| parse_error(line_no, format!("bad tour index '{t}'")))?;
        if v == 0 || v > n {
            return Err(parse_error(line_no, format!("tour index {v} out of 1..={n}")));
        }
        order.push(v - 1);
    }
    if tour_tokens[n] != tour_tokens[0] {
        return Err(parse_error(line_no, "tour is not closed (last index must repeat the first)"));
    }
    let instance = TspInstance::new(points)
        .map_err(|e| parse_error(line_no, e.to_string()))?;
    let tour = Tour::new(order).map_err(|e| parse_error(line_no, e.to_string()))?;
    Ok((instance, tour))
}

/// Read a dataset file. The split/seed metadata is not part of the
/// format; the result is tagged [`Split::Test`] with seed 0.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut n = 0usize;
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let (instance, tour) = parse_record(&line, line_no)?;
        if n == 0 {
            n = instance.n();
        } else if instance.n() != n {
            return Err(parse_error(
                line_no,
                format!("instance size {} differs from first line's {n}", instance.n()),
            ));
        }
        records.push((instance, tour));
    }
    if records.is_empty() {
        return Err(parse_error(1, "dataset file contains no records"));
    }
    Ok(Dataset { split: Split::Test, n, seed: 0, records, mean_solve_ms: None })
}

/// Summary statistics of the stored optimal tours.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub split: &'static str,
    pub n: usize,
    pub count: usize,
    pub mean_len: f64,
    /// Population standard deviation.
    pub std_len: f64,
    pub mean_solve_ms: Option<f64>,
}

pub const STATS_CSV_HEADER: &str = "split,n,count,mean_len,std_len,mean_solve_ms";

impl DatasetStats {
    pub fn csv_row(&self) -> String {
        let ms = self
            .mean_solve_ms
            .map(|v| format!("{v:.3}"))
            .unwrap_or_default();
        format!(
            "{},{},{},{:.6},{:.6},{}",
            self.split, self.n, self.count, self.mean_len, self.std_len, ms
        )
    }
}

pub fn dataset_stats(dataset: &Dataset) -> Result<DatasetStats> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    let lens: Vec<f64> = dataset
        .records
        .iter()
        .map(|(inst, tour)| tour_length(inst, tour))
        .collect::<Result<_>>()?;
    let count = lens.len();
    let mean = lens.iter().sum::<f64>() / count as f64;
    let var = lens.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / count as f64;
    Ok(DatasetStats {
        split: dataset.split.name(),
        n: dataset.n,
        count,
        mean_len: mean,
        std_len: var.sqrt(),
        mean_solve_ms: dataset.mean_solve_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instance_generation_is_deterministic_and_in_range() {
        let mut a = SplitMix64::substream(42, 0);
        let mut b = SplitMix64::substream(42, 0);
        let ia = generate_instance(10, &mut a).unwrap();
        let ib = generate_instance(10, &mut b).unwrap();
        assert_eq!(ia, ib);
        for p in ia.points() {
            assert!((0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1]));
        }
        assert!(generate_instance(2, &mut a).is_err());
    }

    #[test]
    fn coordinate_means_concentrate_near_half() {
        let mut sums = [0.0f64; 2];
        let mut count = 0usize;
        for i in 0..10_000u64 {
            let mut rng = SplitMix64::substream(123, i);
            let inst = generate_instance(10, &mut rng).unwrap();
            for p in inst.points() {
                sums[0] += p[0];
                sums[1] += p[1];
                count += 1;
            }
        }
        for s in sums {
            let mean = s / count as f64;
            assert!((0.49..=0.51).contains(&mean), "coordinate mean {mean}");
        }
    }

    #[test]
    fn dataset_generation_reproduces_byte_identical_files() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.txt");
        let p2 = dir.path().join("b.txt");
        let d1 = generate_dataset(8, 20, 7, SolverKind::Brute, Split::Test).unwrap();
        let d2 = generate_dataset(8, 20, 7, SolverKind::Brute, Split::Test).unwrap();
        write_dataset(&d1, &p1).unwrap();
        write_dataset(&d2, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.txt");
        let d = generate_dataset(7, 25, 3, SolverKind::HeldKarp, Split::Test).unwrap();
        write_dataset(&d, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back.n, d.n);
        assert_eq!(back.records, d.records);
    }

    #[test]
    fn one_indexed_file_maps_to_zero_indexed_tour() {
        let line = "0.000000 0.000000 1.000000 0.000000 1.000000 1.000000 output 1 3 2 1";
        let (inst, tour) = parse_record(line, 1).unwrap();
        assert_eq!(inst.n(), 3);
        assert_eq!(tour.order(), &[0, 2, 1]);
    }

    #[test]
    fn truncated_line_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.txt");
        let d = generate_dataset(6, 3, 5, SolverKind::Brute, Split::Test).unwrap();
        let mut text = String::new();
        for (inst, tour) in &d.records {
            text.push_str(&format_record(inst, tour));
            text.push('\n');
        }
        // chop the last token off line 2
        let mut lines: Vec<&str> = text.lines().collect();
        let cut = lines[1].rfind(' ').unwrap();
        let truncated = &lines[1][..cut];
        lines[1] = truncated;
        std::fs::write(&path, lines.join("\n")).unwrap();
        match read_dataset(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error with line number, got {other:?}"),
        }
    }

    #[test]
    fn stats_single_record_has_zero_std() {
        let mut d = generate_dataset(6, 2, 9, SolverKind::Brute, Split::Val).unwrap();
        d.records.truncate(1);
        let s = dataset_stats(&d).unwrap();
        assert_eq!(s.count, 1);
        assert_eq!(s.std_len, 0.0);
        assert_eq!(s.split, "val");
    }

    #[test]
    fn stats_reject_empty_dataset() {
        let d = Dataset { split: Split::Test, n: 5, seed: 0, records: vec![], mean_solve_ms: None };
        assert!(matches!(dataset_stats(&d), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn stored_tours_match_held_karp_spot_check() {
        let d = generate_dataset(8, 100, 11, SolverKind::HeldKarp, Split::Test).unwrap();
        for (inst, tour) in &d.records {
            let fresh = oracle::solve_held_karp(inst).unwrap();
            let stored = tour_length(inst, tour).unwrap();
            let resolved = tour_length(inst, &fresh).unwrap();
            assert_eq!(stored, resolved);
        }
    }

    #[test]
    fn solver_cap_violation_is_a_size_error() {
        assert!(matches!(
            generate_dataset(12, 1, 0, SolverKind::Brute, Split::Test),
            Err(Error::SizeLimit(_))
        ));
    }
}
