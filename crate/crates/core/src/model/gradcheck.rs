//! Central finite-difference verification of [`backward`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{backward, forward, loss, Batch, Mode, Model, Targets};
use crate::Result;

#[derive(Debug, Clone, Serialize)]
pub struct Coordinate {
    pub array: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub eps: f64,
    pub coordinates: Vec<Coordinate>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&Coordinate> {
        self.coordinates
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic gradients with the five-point central difference
/// `(L(θ-2ε) - 8L(θ-ε) + 8L(θ+ε) - L(θ+2ε)) / 12ε` on `samples` coordinates.
/// Its truncation error is O(ε⁴). Arrays are visited round-robin and a uniform coordinate is
/// drawn within each, so every array is covered once `samples` exceeds the
/// array count. Dropout runs in training mode with masks fixed by
/// `dropout_seed`, identical on every evaluation.
#[allow(clippy::too_many_arguments)]
pub fn check_gradients(
    model: &Model<f64>,
    batch: &Batch,
    mlm_rows: &[usize],
    targets: &Targets,
    dropout_seed: u64,
    eps: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let mode = Mode::Train { dropout_seed };
    let fwd = forward(model, batch, mlm_rows, mode)?;
    let cache = fwd.cache.expect("training mode keeps the cache");
    let out = loss(&fwd.logits, targets)?;
    let grads = backward(model, &cache, &out)?;

    let eval = |m: &Model<f64>| -> Result<f64> {
        let f = forward(m, batch, mlm_rows, mode)?;
        Ok(loss(&f.logits, targets)?.value)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = model.clone();
    let n_arrays = model.params.arrays.len();
    let mut coordinates = Vec::with_capacity(samples);
    for s in 0..samples {
        let a = s % n_arrays;
        let len = model.params.arrays[a].data.len();
        let index = rng.random_range(0..len);
        let orig = model.params.arrays[a].data[index];
        let mut at = |k: f64| -> Result<f64> {
            probe.params.arrays[a].data[index] = orig + k * eps;
            eval(&probe)
        };
        let (m2, m1, p1, p2) = (at(-2.0)?, at(-1.0)?, at(1.0)?, at(2.0)?);
        probe.params.arrays[a].data[index] = orig;
        let numeric = (m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * eps);
        let analytic = grads.arrays[a].data[index];
        coordinates.push(Coordinate {
            array: model.params.arrays[a].name.clone(),
            index,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    let max_rel_error = coordinates.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        eps,
        coordinates,
        max_rel_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HeadKind, ModelConfig, IGNORE};

    fn batch() -> Batch {
        let ids: [&[u32]; 2] = [&[2, 7, 9, 4, 11, 3, 20, 3], &[2, 30, 4, 12, 3, 0, 0, 0]];
        let seg: [&[u32]; 2] = [&[0, 0, 0, 0, 0, 0, 1, 1], &[0, 0, 0, 0, 0, 0, 0, 0]];
        let mask: [&[u8]; 2] = [&[1; 8], &[1, 1, 1, 1, 1, 0, 0, 0]];
        Batch::from_rows((0..2).map(|i| (ids[i], seg[i], mask[i])))
    }

    fn check(head: HeadKind, targets: Targets, mlm_rows: &[usize], tie: bool) {
        let cfg = ModelConfig {
            tie_mlm_output: tie,
            ..ModelConfig::tiny()
        };
        let model = Model::<f64>::new(cfg, head, 11).unwrap();
        let r = check_gradients(&model, &batch(), mlm_rows, &targets, 5, 1e-3, 60, 1).unwrap();
        let w = r.worst().unwrap();
        assert!(r.max_rel_error < 1e-4, "{head:?}: {w:?}");
    }

    #[test]
    fn pretrain_heads() {
        let t = Targets::Pretrain {
            mlm_labels: vec![9, 12, 30],
            nsp_labels: Some(vec![1, 0]),
        };
        check(HeadKind::Pretrain { nsp: true }, t.clone(), &[2, 4, 9], true);
        check(HeadKind::Pretrain { nsp: true }, t, &[2, 4, 9], false);
        let t = Targets::Pretrain {
            mlm_labels: vec![9],
            nsp_labels: None,
        };
        check(HeadKind::Pretrain { nsp: false }, t, &[2], true);
    }

    #[test]
    fn classifier_heads() {
        let labels = vec![IGNORE, 1, 2, 0, 4, IGNORE, 3, IGNORE, IGNORE, 6, 0, 5, IGNORE, IGNORE, IGNORE, IGNORE];
        check(HeadKind::TokenClassify { classes: 7 }, Targets::Token(labels), &[], true);
        check(HeadKind::SeqClassify { classes: 3 }, Targets::Seq(vec![2, 0]), &[], true);
    }
}
