//! InfoNCE objective over future encoder frames with within-speaker negatives.
//!
//! For window `b`, position `t` and horizon `k`, the candidates are the true
//! frame `t+k` (column 0) and `n_neg` frames drawn uniformly with
//! replacement from every frame in the batch that belongs to the same
//! speaker, excluding the positive itself. The score is the dot product of
//! the prediction with each candidate; the term loss is the negative
//! log-softmax of the positive. The denominator includes the positive.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{concat_rows, Real, Var};

/// Speaker of every window in a batch; all windows have `frames` frames.
#[derive(Clone, Debug)]
pub struct BatchLayout {
    pub speakers: Vec<usize>,
    pub frames: usize,
}

impl BatchLayout {
    pub fn new(speakers: Vec<usize>, frames: usize) -> Self {
        Self { speakers, frames }
    }

    pub fn windows(&self) -> usize {
        self.speakers.len()
    }

    /// Flat row of `(window, frame)` in the batch frame pool.
    pub fn flat(&self, window: usize, frame: usize) -> usize {
        window * self.frames + frame
    }

    fn same_speaker_windows(&self, window: usize) -> Vec<usize> {
        let s = self.speakers[window];
        (0..self.windows()).filter(|&w| self.speakers[w] == s).collect()
    }
}

/// A frame of the batch pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FrameRef {
    pub window: usize,
    pub frame: usize,
}

/// Negatives for every scored `(window, t, k)`, flattened row-major over
/// `(k, window, t)` with `n_neg` entries each.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativeSet {
    pub n_neg: usize,
    pub horizon: usize,
    /// Number of scored positions per window, `T − K`.
    pub positions: usize,
    pub windows: usize,
    /// Flat pool rows.
    pub indices: Vec<usize>,
}

impl NegativeSet {
    pub fn get(&self, k: usize, window: usize, t: usize) -> &[usize] {
        let row = (k * self.windows + window) * self.positions + t;
        &self.indices[row * self.n_neg..(row + 1) * self.n_neg]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct NegativeOptions {
    /// Draw one negative list per `t` and reuse it for every `k`. The list then
    /// excludes all of `t+1..=t+K`.
    pub shared_across_k: bool,
}

/// Draws `n_neg` negatives for the positive frame `(window, t + k)`.
///
/// `k` is 1-based. The pool is every frame of every window in the batch with
/// the same speaker, minus the positive.
pub fn sample_negatives(
    layout: &BatchLayout,
    window: usize,
    t: usize,
    k: usize,
    n_neg: usize,
    rng: &mut impl Rng,
) -> Result<Vec<FrameRef>> {
    let excluded = [layout.flat(window, t + k)];
    let pool = pool_for(layout, window, &excluded)?;
    Ok((0..n_neg)
        .map(|_| {
            let flat = pool[rng.gen_range(0..pool.len())];
            FrameRef {
                window: flat / layout.frames,
                frame: flat % layout.frames,
            }
        })
        .collect())
}

fn pool_for(layout: &BatchLayout, window: usize, excluded: &[usize]) -> Result<Vec<usize>> {
    let pool: Vec<usize> = layout
        .same_speaker_windows(window)
        .into_iter()
        .flat_map(|w| (0..layout.frames).map(move |f| layout.flat(w, f)))
        .filter(|i| !excluded.contains(i))
        .collect();
    if pool.is_empty() {
        return Err(Error::Data(format!(
            "speaker {} has no frames besides the positive; use longer windows or regroup the batch",
            layout.speakers[window]
        )));
    }
    Ok(pool)
}

/// Draws negatives for every scored position of a batch with horizon `horizon`.
pub fn sample_negative_set(
    layout: &BatchLayout,
    horizon: usize,
    n_neg: usize,
    options: NegativeOptions,
    rng: &mut impl Rng,
) -> Result<NegativeSet> {
    if layout.frames <= horizon {
        return Err(Error::Data(format!(
            "windows of {} frames leave no position with a full horizon of {horizon}",
            layout.frames
        )));
    }
    let positions = layout.frames - horizon;
    let windows = layout.windows();
    let mut indices = vec![0; horizon * windows * positions * n_neg];
    let mut put = |k: usize, w: usize, t: usize, vals: &[usize]| {
        let row = (k * windows + w) * positions + t;
        indices[row * n_neg..(row + 1) * n_neg].copy_from_slice(vals);
    };
    if options.shared_across_k {
        for w in 0..windows {
            for t in 0..positions {
                let excluded: Vec<usize> = (1..=horizon).map(|k| layout.flat(w, t + k)).collect();
                let pool = pool_for(layout, w, &excluded)?;
                let draw: Vec<usize> = (0..n_neg).map(|_| pool[rng.gen_range(0..pool.len())]).collect();
                for k in 0..horizon {
                    put(k, w, t, &draw);
                }
            }
        }
    } else {
        for k in 0..horizon {
            for w in 0..windows {
                for t in 0..positions {
                    let draw: Vec<usize> = sample_negatives(layout, w, t, k + 1, n_neg, rng)?
                        .into_iter()
                        .map(|f| layout.flat(f.window, f.frame))
                        .collect();
                    put(k, w, t, &draw);
                }
            }
        }
    }
    Ok(NegativeSet {
        n_neg,
        horizon,
        positions,
        windows,
        indices,
    })
}

/// Loss and per-horizon accuracy of one batch.
pub struct LossReport<'g, R: Real> {
    /// Mean term loss over all scored `(window, t, k)`.
    pub loss: Var<'g, R>,
    /// Fraction of positions where the positive scored strictly highest, per horizon.
    pub accuracy_per_k: Vec<f64>,
}

/// InfoNCE over a batch.
///
/// `preds[w][k]` is `[T × C]` for window `w`, `targets[w]` the `[T × C]`
/// encoder output of window `w`.
pub fn info_nce<'g, R: Real>(
    preds: &[Vec<Var<'g, R>>],
    targets: &[Var<'g, R>],
    negatives: &NegativeSet,
) -> Result<LossReport<'g, R>> {
    let windows = targets.len();
    if windows == 0 || preds.len() != windows || negatives.windows != windows {
        return Err(Error::shape("info_nce", "window counts of predictions, targets and negatives differ"));
    }
    let horizon = negatives.horizon;
    let frames = targets[0].value().rows();
    if frames <= horizon {
        return Err(Error::Data(format!(
            "no scorable position: T = {frames} frames with horizon K = {horizon}"
        )));
    }
    let positions = frames - horizon;
    if negatives.positions != positions {
        return Err(Error::shape("info_nce", "negative set built for a different window length"));
    }
    let pool = concat_rows(targets)?;
    let n_cand = negatives.n_neg + 1;
    let mut terms = Vec::with_capacity(horizon);
    let mut accuracy_per_k = Vec::with_capacity(horizon);
    for k in 0..horizon {
        let rows: Vec<_> = preds
            .iter()
            .map(|p| {
                p.get(k)
                    .ok_or_else(|| Error::shape("info_nce", format!("missing prediction for horizon {}", k + 1)))?
                    .slice_rows(0, positions)
            })
            .collect::<Result<_>>()?;
        let pred_k = concat_rows(&rows)?;
        let mut idx = Vec::with_capacity(windows * positions * n_cand);
        for w in 0..windows {
            for t in 0..positions {
                idx.push(w * frames + t + k + 1);
                idx.extend_from_slice(negatives.get(k, w, t));
            }
        }
        let scores = pred_k.candidate_scores(pool, idx, n_cand)?;
        {
            let s = scores.value();
            let hits = (0..s.rows())
                .filter(|&r| {
                    let row = s.row(r);
                    row[1..].iter().all(|&v| row[0] > v)
                })
                .count();
            accuracy_per_k.push(hits as f64 / s.rows() as f64);
        }
        let picked = scores.log_softmax()?.pick_per_row(vec![0; windows * positions])?;
        terms.push(picked);
    }
    let all = concat_rows(
        &terms
            .into_iter()
            .map(|t| {
                let n = t.value().len();
                t.reshape(vec![n, 1])
            })
            .collect::<Result<Vec<_>>>()?,
    )?;
    let loss = all.mean().scale(R::from_f64_lossy(-1.0));
    Ok(LossReport { loss, accuracy_per_k })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_utterance_negatives_avoid_positive() {
        let layout = BatchLayout::new(vec![0], 128);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let neg = sample_negatives(&layout, 0, 10, 3, 500, &mut rng).unwrap();
        assert!(neg.iter().all(|f| f.window == 0 && f.frame != 13 && f.frame < 128));
    }

    #[test]
    fn negatives_stay_within_speaker() {
        let layout = BatchLayout::new(vec![0, 1, 0, 2], 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let set = sample_negative_set(&layout, 2, 16, NegativeOptions::default(), &mut rng).unwrap();
        for k in 0..2 {
            for w in 0..4 {
                for t in 0..6 {
                    for &i in set.get(k, w, t) {
                        assert_eq!(layout.speakers[i / 8], layout.speakers[w]);
                        assert_ne!(i, layout.flat(w, t + k + 1));
                    }
                }
            }
        }
    }

    #[test]
    fn shared_negatives_exclude_all_positives() {
        let layout = BatchLayout::new(vec![0, 0], 6);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let opts = NegativeOptions { shared_across_k: true };
        let set = sample_negative_set(&layout, 2, 20, opts, &mut rng).unwrap();
        for w in 0..2 {
            for t in 0..4 {
                assert_eq!(set.get(0, w, t), set.get(1, w, t));
                for &i in set.get(0, w, t) {
                    assert!(i != layout.flat(w, t + 1) && i != layout.flat(w, t + 2));
                }
            }
        }
    }

    #[test]
    fn lone_positive_is_an_error() {
        let layout = BatchLayout::new(vec![0], 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = sample_negatives(&layout, 0, 0, 0, 4, &mut rng).unwrap_err();
        assert!(err.to_string().contains("regroup"));
    }

    #[test]
    fn seeded_sampling_repeats() {
        let layout = BatchLayout::new(vec![0, 0, 1], 16);
        let a = sample_negative_set(&layout, 3, 8, NegativeOptions::default(), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = sample_negative_set(&layout, 3, 8, NegativeOptions::default(), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_short_window_rejected() {
        let layout = BatchLayout::new(vec![0], 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_negative_set(&layout, 4, 2, NegativeOptions::default(), &mut rng).is_err());
    }
}
