//! Turn an edge-probability heat-map into a valid tour: greedy search,
//! beam search over partial tours, and beam search with the
//! shortest-tour selection rule.
//!
//! All scores accumulate in the log domain through one shared
//! [`edge_log_prob`] so that the decoders and [`tour_probability`] rank
//! tours identically. Probabilities are clamped below at `1e-12` before
//! the logarithm; an exactly-zero probability scores negative infinity.

use rayon::prelude::*;

use crate::geom::{tour_length, Tour, TspInstance};
use crate::model::HeatMap;
use crate::{Error, Result};

/// Probability floor applied before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Beam search tracks visited sets in a u128 mask.
pub const MAX_DECODE_N: usize = 128;

/// Log probability of one directed edge under the clamping rule.
#[inline]
pub fn edge_log_prob(p: f64) -> f64 {
    if p <= 0.0 {
        f64::NEG_INFINITY
    } else {
        p.max(PROB_FLOOR).ln()
    }
}

/// Log probability of a complete tour: the sum of edge log
/// probabilities over consecutive directed edges, closing edge included.
pub fn tour_probability(heatmap: &HeatMap, tour: &Tour) -> Result<f64> {
    if tour.n() != heatmap.n() {
        return Err(Error::InvalidArgument(format!(
            "tour over {} nodes does not fit heat-map with n = {}",
            tour.n(),
            heatmap.n()
        )));
    }
    // summed in tour order, matching the beam accumulation exactly
    let order = tour.order();
    let n = order.len();
    let mut acc = 0.0;
    for i in 0..n - 1 {
        acc += edge_log_prob(heatmap.get(order[i], order[i + 1]));
    }
    acc += edge_log_prob(heatmap.get(order[n - 1], order[0]));
    Ok(acc)
}

fn check_decode_input(heatmap: &HeatMap, start: usize) -> Result<usize> {
    let n = heatmap.n();
    if n > MAX_DECODE_N {
        return Err(Error::SizeLimit(format!(
            "decoders support n <= {MAX_DECODE_N}, got {n}"
        )));
    }
    if start >= n {
        return Err(Error::InvalidArgument(format!(
            "start node {start} out of range for n = {n}"
        )));
    }
    Ok(n)
}

/// Greedy decoding: from `start`, repeatedly hop to the unvisited node
/// with the highest edge probability. Ties (after clamping) go to the
/// lower node index.
pub fn greedy_decode(heatmap: &HeatMap, start: usize) -> Result<Tour> {
    let n = check_decode_input(heatmap, start)?;
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    visited[start] = true;
    order.push(start);
    let mut current = start;
    for _ in 1..n {
        let mut best = usize::MAX;
        let mut best_lp = f64::NEG_INFINITY;
        for j in 0..n {
            if !visited[j] {
                let lp = edge_log_prob(heatmap.get(current, j));
                if lp > best_lp || best == usize::MAX {
                    best_lp = lp;
                    best = j;
                }
            }
        }
        visited[best] = true;
        order.push(best);
        current = best;
    }
    Tour::new(order)
}

/// Partial tours tracked during one beam-search stage.
#[derive(Debug, Clone)]
struct BeamEntry {
    log_prob: f64,
    node: u8,
    visited: u128,
    /// Index into the previous stage.
    parent: u32,
}

/// The survivors of each stage, kept for path reconstruction.
#[derive(Debug)]
pub struct BeamState {
    stages: Vec<Vec<BeamEntry>>,
}

impl BeamState {
    /// Number of complete partial tours in the final stage.
    pub fn final_width(&self) -> usize {
        self.stages.last().map_or(0, |s| s.len())
    }

    fn reconstruct(&self, mut stage: usize, mut index: usize) -> Vec<usize> {
        let mut rev = Vec::with_capacity(stage + 1);
        loop {
            let entry = &self.stages[stage][index];
            rev.push(entry.node as usize);
            if stage == 0 {
                break;
            }
            index = entry.parent as usize;
            stage -= 1;
        }
        rev.reverse();
        rev
    }
}

/// Run the beam to completion: all partial tours start at `start`; at
/// each stage every partial tour extends to every unvisited node and
/// the `b` best candidates survive, ranked by cumulative log
/// probability with ties broken by lower new-node index, then lower
/// parent beam index.
fn run_beam(heatmap: &HeatMap, b: usize, start: usize) -> Result<BeamState> {
    let n = check_decode_input(heatmap, start)?;
    if b == 0 {
        return Err(Error::InvalidArgument("beam width must be >= 1".into()));
    }
    let mut stages = Vec::with_capacity(n);
    stages.push(vec![BeamEntry {
        log_prob: 0.0,
        node: start as u8,
        visited: 1u128 << start,
        parent: 0,
    }]);
    for _ in 1..n {
        let prev = stages.last().unwrap();
        let mut candidates: Vec<BeamEntry> = Vec::with_capacity(prev.len() * (n - 1));
        for (pi, entry) in prev.iter().enumerate() {
            for j in 0..n {
                if entry.visited & (1u128 << j) != 0 {
                    continue;
                }
                candidates.push(BeamEntry {
                    log_prob: entry.log_prob + edge_log_prob(heatmap.get(entry.node as usize, j)),
                    node: j as u8,
                    visited: entry.visited | (1u128 << j),
                    parent: pi as u32,
                });
            }
        }
        candidates.sort_by(|a, c| {
            c.log_prob
                .partial_cmp(&a.log_prob)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.node.cmp(&c.node))
                .then(a.parent.cmp(&c.parent))
        });
        candidates.truncate(b);
        stages.push(candidates);
    }
    Ok(BeamState { stages })
}

/// Beam search returning the complete tour with the highest total
/// probability (closing edge included in the score).
pub fn beam_decode(heatmap: &HeatMap, b: usize, start: usize) -> Result<Tour> {
    let state = run_beam(heatmap, b, start)?;
    let finals = state.stages.last().unwrap();
    let mut best = 0usize;
    let mut best_lp = f64::NEG_INFINITY;
    for (i, entry) in finals.iter().enumerate() {
        let total = entry.log_prob + edge_log_prob(heatmap.get(entry.node as usize, start));
        if total > best_lp || i == 0 {
            best_lp = total;
            best = i;
        }
    }
    Tour::new(state.reconstruct(state.stages.len() - 1, best))
}

/// Beam search returning the shortest tour (by Euclidean length) among
/// the final complete beams.
pub fn beam_decode_shortest(
    heatmap: &HeatMap,
    instance: &TspInstance,
    b: usize,
    start: usize,
) -> Result<Tour> {
    if instance.n() != heatmap.n() {
        return Err(Error::InvalidArgument(format!(
            "instance with {} nodes does not fit heat-map with n = {}",
            instance.n(),
            heatmap.n()
        )));
    }
    let state = run_beam(heatmap, b, start)?;
    let finals = state.stages.last().unwrap();
    let mut best_tour: Option<Tour> = None;
    let mut best_len = f64::INFINITY;
    for i in 0..finals.len() {
        let tour = Tour::new(state.reconstruct(state.stages.len() - 1, i))?;
        let len = tour_length(instance, &tour)?;
        if len < best_len {
            best_len = len;
            best_tour = Some(tour);
        }
    }
    best_tour.ok_or_else(|| Error::State("beam search produced no complete tour".into()))
}

/// Which decoder a batch run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderKind {
    Greedy,
    Beam { width: usize },
    BeamShortest { width: usize },
}

impl DecoderKind {
    pub fn parse(name: &str, width: usize) -> Result<Self> {
        match name {
            "greedy" => Ok(DecoderKind::Greedy),
            "beam" => Ok(DecoderKind::Beam { width }),
            "beam-shortest" => Ok(DecoderKind::BeamShortest { width }),
            other => Err(Error::InvalidArgument(format!(
                "unknown decoder '{other}' (expected greedy|beam|beam-shortest)"
            ))),
        }
    }

    pub fn decode(self, heatmap: &HeatMap, instance: &TspInstance, start: usize) -> Result<Tour> {
        match self {
            DecoderKind::Greedy => greedy_decode(heatmap, start),
            DecoderKind::Beam { width } => beam_decode(heatmap, width, start),
            DecoderKind::BeamShortest { width } => {
                beam_decode_shortest(heatmap, instance, width, start)
            }
        }
    }
}

/// Decode a batch of instances in parallel; output order matches input
/// order regardless of thread scheduling.
pub fn decode_batch(
    pairs: &[(&HeatMap, &TspInstance)],
    decoder: DecoderKind,
    start: usize,
) -> Result<Vec<Tour>> {
    pairs
        .par_iter()
        .map(|(hm, inst)| decoder.decode(hm, inst, start))
        .collect()
}
