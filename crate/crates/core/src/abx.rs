//! ABX phone discriminability with DTW-aligned cosine distances.
//!
//! For categories `a ≠ b` inside one grouping, the error θ(a, b) is the
//! fraction of triplets `(A ∈ a, B ∈ b, X ∈ a)` with X strictly closer to B
//! than to A, ties counting one half. Within-speaker groupings hold one
//! speaker and require X to be a different segment than A. Across-speaker
//! groupings take A and B from one speaker and X from another.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{Dataset, Inventory};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::ParamSet;
use crate::tensor::{Real, Tensor};

/// Added to frame norms so an all-zero frame does not divide by zero.
pub const NORM_GUARD: f64 = 1e-12;
pub const DEFAULT_TRIPLET_CAP: usize = 5000;
pub const MIN_SEGMENT_FRAMES: usize = 2;

/// Cosine distance between frames, minimised over monotone alignments with
/// steps (1,0), (0,1), (1,1) from the first to the last frame pair, then
/// divided by the number of aligned pairs on the chosen path. Among equally
/// cheap paths the shortest wins.
pub fn dtw_cosine_distance<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Result<f64> {
    let (ta, tb) = (a.rows(), b.rows());
    if ta == 0 || tb == 0 || a.len() == 0 || b.len() == 0 {
        return Err(Error::Data("DTW needs two non-empty sequences".into()));
    }
    if a.cols() != b.cols() {
        return Err(Error::shape("dtw_cosine_distance", format!("{} vs {} channels", a.cols(), b.cols())));
    }
    let norms = |t: &Tensor<R>| -> Vec<f64> {
        (0..t.rows())
            .map(|r| t.row(r).iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt() + NORM_GUARD)
            .collect()
    };
    let (na, nb) = (norms(a), norms(b));
    let cost = |i: usize, j: usize| {
        let dot: f64 = a.row(i).iter().zip(b.row(j)).map(|(x, y)| x.as_f64() * y.as_f64()).sum();
        1.0 - dot / (na[i] * nb[j])
    };
    // acc[j] holds (accumulated cost, path length) for the current row.
    let mut prev: Vec<(f64, usize)> = Vec::with_capacity(tb);
    for j in 0..tb {
        let c = cost(0, j);
        prev.push(if j == 0 { (c, 1) } else { (prev[j - 1].0 + c, prev[j - 1].1 + 1) });
    }
    let better = |x: (f64, usize), y: (f64, usize)| if y.0 < x.0 || (y.0 == x.0 && y.1 < x.1) { y } else { x };
    for i in 1..ta {
        let mut cur: Vec<(f64, usize)> = Vec::with_capacity(tb);
        for j in 0..tb {
            let mut best = prev[j];
            if j > 0 {
                best = better(prev[j - 1], best);
                best = better(best, cur[j - 1]);
            }
            cur.push((best.0 + cost(i, j), best.1 + 1));
        }
        prev = cur;
    }
    let (total, len) = prev[tb - 1];
    Ok((total / len as f64).max(0.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AbxSegment {
    pub features: Tensor<f32>,
    pub category: usize,
    pub speaker: String,
    pub utterance: String,
    /// First frame, inclusive.
    pub start: usize,
    /// Last frame, exclusive.
    pub end: usize,
    /// Categories of the neighbouring segments, when known.
    pub context: Option<(Option<usize>, Option<usize>)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AbxMode {
    Within,
    Across,
}

impl AbxMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AbxMode::Within => "within",
            AbxMode::Across => "across",
        }
    }
}

/// Order in which cell scores are averaged.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    /// Mean over category pairs inside each grouping, then over groupings.
    PairsThenSpeakers,
    /// Mean over groupings for each category pair, then over pairs.
    SpeakersThenPairs,
}

impl Aggregation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pairs-then-speakers" => Ok(Aggregation::PairsThenSpeakers),
            "speakers-then-pairs" => Ok(Aggregation::SpeakersThenPairs),
            other => Err(Error::Config(format!(
                "unknown aggregation `{other}` (expected pairs-then-speakers or speakers-then-pairs)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AbxOptions {
    pub mode: AbxMode,
    pub aggregation: Aggregation,
    /// Cells with more triplets are subsampled to this many.
    pub triplet_cap: Option<usize>,
    pub seed: u64,
}

impl AbxOptions {
    pub fn new(mode: AbxMode) -> Self {
        Self {
            mode,
            aggregation: Aggregation::PairsThenSpeakers,
            triplet_cap: Some(DEFAULT_TRIPLET_CAP),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AbxReport {
    pub mode: AbxMode,
    /// Aggregate error in percent.
    pub error: f64,
    /// Symmetrised error in percent of each unordered category pair `(a, b)`,
    /// `a < b`, averaged over the groupings that score it.
    pub pairs: BTreeMap<(usize, usize), f64>,
    /// Mean symmetrised error in percent of each grouping (`spk` within,
    /// `spkAB>spkX` across).
    pub groupings: BTreeMap<String, f64>,
    pub scored_cells: usize,
    /// Ordered cells lacking an eligible A, B or X.
    pub skipped_cells: usize,
    /// Triplets evaluated over all cells.
    pub triplets: usize,
}

/// One grouping: the segments A and B come from, and those X comes from.
struct Grouping {
    key: String,
    ab: Vec<usize>,
    x: Vec<usize>,
    /// X and A are drawn from the same pool and must differ.
    distinct: bool,
}

fn groupings(segments: &[AbxSegment], mode: AbxMode) -> Vec<Grouping> {
    let mut by_speaker: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in segments.iter().enumerate() {
        by_speaker.entry(&s.speaker).or_default().push(i);
    }
    match mode {
        AbxMode::Within => by_speaker
            .iter()
            .map(|(spk, idx)| Grouping {
                key: spk.to_string(),
                ab: idx.clone(),
                x: idx.clone(),
                distinct: true,
            })
            .collect(),
        AbxMode::Across => {
            let mut out = Vec::new();
            for (s1, ab) in &by_speaker {
                for (s2, x) in &by_speaker {
                    if s1 != s2 {
                        out.push(Grouping {
                            key: format!("{s1}>{s2}"),
                            ab: ab.clone(),
                            x: x.clone(),
                            distinct: false,
                        });
                    }
                }
            }
            out
        }
    }
}

fn by_category(segments: &[AbxSegment], idx: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut m: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in idx {
        m.entry(segments[i].category).or_default().push(i);
    }
    m
}

/// Triplets `(a, b, x)` of one ordered cell, exhaustive or capped.
fn cell_triplets(
    a: &[usize],
    b: &[usize],
    x: &[usize],
    distinct: bool,
    cap: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize, usize)> {
    let x_per_a = |ai: usize| x.iter().filter(move |&&xi| !(distinct && xi == ai));
    let total: usize = a.iter().map(|&ai| x_per_a(ai).count()).sum::<usize>() * b.len();
    match cap {
        Some(cap) if total > cap => (0..cap)
            .map(|_| loop {
                let ai = a[rng.gen_range(0..a.len())];
                let xi = x[rng.gen_range(0..x.len())];
                if distinct && xi == ai {
                    continue;
                }
                break (ai, b[rng.gen_range(0..b.len())], xi);
            })
            .collect(),
        _ => {
            let mut out = Vec::with_capacity(total);
            for &ai in a {
                for &bi in b {
                    for &xi in x_per_a(ai) {
                        out.push((ai, bi, xi));
                    }
                }
            }
            out
        }
    }
}

/// ABX error over `segments`; see the module documentation.
pub fn abx_score(segments: &[AbxSegment], options: &AbxOptions) -> Result<AbxReport> {
    let categories: BTreeSet<usize> = segments.iter().map(|s| s.category).collect();
    if categories.len() < 2 {
        return Err(Error::Data("ABX needs at least two categories".into()));
    }
    let groups = groupings(segments, options.mode);
    if groups.is_empty() {
        return Err(Error::Data("across-speaker ABX needs at least two speakers".into()));
    }

    // Ordered cells: (grouping, a, b) -> triplets.
    let mut cells: Vec<(usize, usize, usize, Vec<(usize, usize, usize)>)> = Vec::new();
    let mut skipped = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    for (gi, g) in groups.iter().enumerate() {
        let ab = by_category(segments, &g.ab);
        let xs = by_category(segments, &g.x);
        for &ca in &categories {
            for &cb in &categories {
                if ca == cb {
                    continue;
                }
                let (a, b, x) = match (ab.get(&ca), ab.get(&cb), xs.get(&ca)) {
                    (Some(a), Some(b), Some(x)) => (a, b, x),
                    _ => {
                        skipped += 1;
                        continue;
                    }
                };
                let trip = cell_triplets(a, b, x, g.distinct, options.triplet_cap, &mut rng);
                if trip.is_empty() {
                    skipped += 1;
                    continue;
                }
                cells.push((gi, ca, cb, trip));
            }
        }
    }

    let mut pairs_needed: BTreeSet<(usize, usize)> = BTreeSet::new();
    for (_, _, _, trip) in &cells {
        for &(a, b, x) in trip {
            pairs_needed.insert((x, a));
            pairs_needed.insert((x, b));
        }
    }
    let pair_list: Vec<(usize, usize)> = pairs_needed.into_iter().collect();
    let values: Vec<f64> = pair_list
        .par_iter()
        .map(|&(x, y)| dtw_cosine_distance(&segments[x].features, &segments[y].features))
        .collect::<Result<_>>()?;
    let dist: BTreeMap<(usize, usize), f64> = pair_list.into_iter().zip(values).collect();

    let mut theta: BTreeMap<(usize, usize, usize), f64> = BTreeMap::new();
    let mut triplets = 0usize;
    for (gi, ca, cb, trip) in &cells {
        let sum: f64 = trip
            .iter()
            .map(|&(a, b, x)| {
                let (dxa, dxb) = (dist[&(x, a)], dist[&(x, b)]);
                if dxb < dxa {
                    1.0
                } else if dxb == dxa {
                    0.5
                } else {
                    0.0
                }
            })
            .sum();
        triplets += trip.len();
        theta.insert((*gi, *ca, *cb), sum / trip.len() as f64);
    }

    // Symmetrised scores of unordered pairs present in both orders.
    let mut sym: BTreeMap<(usize, usize, usize), f64> = BTreeMap::new();
    for (&(gi, ca, cb), &t) in &theta {
        if ca < cb {
            if let Some(&back) = theta.get(&(gi, cb, ca)) {
                sym.insert((gi, ca, cb), (t + back) / 2.0);
            }
        }
    }
    if sym.is_empty() {
        return Err(Error::Data("no category pair has eligible triplets in both orders".into()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut per_group: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut per_pair: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for (&(gi, ca, cb), &v) in &sym {
        per_group.entry(gi).or_default().push(v);
        per_pair.entry((ca, cb)).or_default().push(v);
    }
    let error = match options.aggregation {
        Aggregation::PairsThenSpeakers => mean(&per_group.values().map(|v| mean(v)).collect::<Vec<_>>()),
        Aggregation::SpeakersThenPairs => mean(&per_pair.values().map(|v| mean(v)).collect::<Vec<_>>()),
    };
    Ok(AbxReport {
        mode: options.mode,
        error: 100.0 * error,
        pairs: per_pair.into_iter().map(|(k, v)| (k, 100.0 * mean(&v))).collect(),
        groupings: per_group
            .into_iter()
            .map(|(gi, v)| (groups[gi].key.clone(), 100.0 * mean(&v)))
            .collect(),
        scored_cells: cells.len(),
        skipped_cells: skipped,
        triplets,
    })
}

/// Maximal runs of equal labels as `(start, end_exclusive, label)`, keeping
/// runs of at least `min_len` frames.
pub fn label_runs(labels: &[usize], min_len: usize) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=labels.len() {
        if i == labels.len() || labels[i] != labels[start] {
            if i - start >= min_len {
                out.push((start, i, labels[start]));
            }
            start = i;
        }
    }
    out
}

/// Segments of every aligned run of at least two frames, with the model's
/// context states as features.
pub fn extract_segments(dataset: &Dataset, model: &ModelConfig, params: &ParamSet<f32>) -> Result<Vec<AbxSegment>> {
    let per_utt: Vec<Vec<AbxSegment>> = dataset
        .utterances
        .par_iter()
        .map(|u| {
            let labels = u
                .aligned
                .as_ref()
                .ok_or_else(|| Error::Data(format!("utterance {} has no aligned labels", u.id)))?;
            let (_, z) = crate::model::features(&u.samples, model, params)?;
            segments_from(&u.id, &u.speaker, labels, &z.frames)
        })
        .collect::<Result<_>>()?;
    Ok(per_utt.into_iter().flatten().collect())
}

/// Cuts `features` (one row per frame) at the runs of `labels`.
pub fn segments_from(utt: &str, speaker: &str, labels: &[usize], features: &Tensor<f32>) -> Result<Vec<AbxSegment>> {
    if labels.len() != features.rows() {
        return Err(Error::Data(format!(
            "utterance {utt}: {} aligned labels for {} feature frames",
            labels.len(),
            features.rows()
        )));
    }
    let all = label_runs(labels, 1);
    let c = features.cols();
    let mut out = Vec::new();
    for (k, &(start, end, label)) in all.iter().enumerate() {
        if end - start < MIN_SEGMENT_FRAMES {
            continue;
        }
        let data = features.data()[start * c..end * c].to_vec();
        out.push(AbxSegment {
            features: Tensor::new(vec![end - start, c], data)?,
            category: label,
            speaker: speaker.to_string(),
            utterance: utt.to_string(),
            start,
            end,
            context: Some((k.checked_sub(1).map(|p| all[p].2), all.get(k + 1).map(|n| n.2))),
        });
    }
    Ok(out)
}

/// One `utt<TAB>start<TAB>end<TAB>phoneme<TAB>speaker` line per segment.
pub fn write_segment_list(path: &Path, segments: &[AbxSegment], inventory: &Inventory) -> Result<()> {
    let mut s = String::new();
    for seg in segments {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}",
            seg.utterance,
            seg.start,
            seg.end,
            inventory.symbol(seg.category),
            seg.speaker
        );
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Segment records without features: `(utt, start, end, category, speaker)`.
pub fn read_segment_list(path: &Path, inventory: &Inventory) -> Result<Vec<(String, usize, usize, usize, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        let bad = |what: &str| Error::Format {
            path: path.to_path_buf(),
            detail: format!("line {}: {what}", n + 1),
        };
        if f.len() != 5 {
            return Err(bad("expected 5 tab-separated fields"));
        }
        let start: usize = f[1].parse().map_err(|_| bad("bad start frame"))?;
        let end: usize = f[2].parse().map_err(|_| bad("bad end frame"))?;
        if end <= start {
            return Err(bad("end frame must exceed start frame"));
        }
        let cat = inventory.index(f[3]).ok_or_else(|| bad("unknown phoneme"))?;
        out.push((f[0].to_string(), start, end, cat, f[4].to_string()));
    }
    Ok(out)
}

/// Plain-text report lines followed by the pair matrix.
pub fn report_text(report: &AbxReport, inventory: &Inventory) -> String {
    let mut s = format!(
        "{}\t{:.4}\nscored_cells\t{}\nskipped_cells\t{}\ntriplets\t{}\n",
        report.mode.as_str(),
        report.error,
        report.scored_cells,
        report.skipped_cells,
        report.triplets
    );
    for (&(a, b), v) in &report.pairs {
        let _ = writeln!(s, "pair\t{}\t{}\t{v:.4}", inventory.symbol(a), inventory.symbol(b));
    }
    s
}

/// `key=value` lines for scripts.
pub fn report_kv(report: &AbxReport) -> String {
    let m = report.mode.as_str();
    format!(
        "abx.{m}.error={}\nabx.{m}.scored_cells={}\nabx.{m}.skipped_cells={}\nabx.{m}.triplets={}\n",
        report.error, report.scored_cells, report.skipped_cells, report.triplets
    )
}
