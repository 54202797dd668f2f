use super::forward::{HeadLogits, Logits};
use super::Real;
use crate::{Error, Result};

/// Label value for positions excluded from the token-classification loss.
pub const IGNORE: i64 = -1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Targets {
    Pretrain {
        mlm_labels: Vec<u32>,
        nsp_labels: Option<Vec<u32>>,
    },
    /// One label per batch row, [`IGNORE`] for unlabeled positions.
    Token(Vec<i64>),
    Seq(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<T> {
    pub value: f64,
    pub mlm: Option<f64>,
    pub nsp: Option<f64>,
    /// Derivative of `value` with respect to every logit.
    pub grad: HeadLogits<T>,
}

impl<T: Real> LossOutput<T> {
    /// Multiplies the loss and its logit gradients by `c`.
    pub fn scale(&mut self, c: f64) {
        self.value *= c;
        self.mlm = self.mlm.map(|v| v * c);
        self.nsp = self.nsp.map(|v| v * c);
        let ct = T::c(c);
        let scale = |l: &mut Logits<T>| l.data.iter_mut().for_each(|v| *v *= ct);
        match &mut self.grad {
            HeadLogits::Pretrain { mlm, nsp } => {
                scale(mlm);
                if let Some(n) = nsp {
                    scale(n);
                }
            }
            HeadLogits::Token(l) | HeadLogits::Seq(l) => scale(l),
        }
    }
}

/// Mean softmax cross-entropy over labeled rows and its logit gradient.
fn cross_entropy<T: Real>(logits: &Logits<T>, labels: &[Option<u32>]) -> Result<(f64, Logits<T>)> {
    if labels.len() != logits.rows {
        return Err(Error::Shape(format!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.rows
        )));
    }
    let count = labels.iter().filter(|l| l.is_some()).count();
    if count == 0 {
        return Err(Error::Data("no labeled positions in batch".into()));
    }
    let mut grad = Logits {
        rows: logits.rows,
        cols: logits.cols,
        data: vec![T::zero(); logits.data.len()],
    };
    let inv = 1.0 / count as f64;
    let mut total = 0.0;
    for (r, label) in labels.iter().enumerate() {
        let Some(y) = *label else { continue };
        let y = y as usize;
        if y >= logits.cols {
            return Err(Error::Shape(format!("label {y} outside {} classes", logits.cols)));
        }
        let row = logits.row(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.f64()));
        let sum: f64 = row.iter().map(|v| (v.f64() - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[y].f64();
        let g = &mut grad.data[r * logits.cols..(r + 1) * logits.cols];
        for (j, gv) in g.iter_mut().enumerate() {
            let p = (row[j].f64() - lse).exp();
            let d = if j == y { p - 1.0 } else { p };
            *gv = T::c(d * inv);
        }
    }
    Ok((total * inv, grad))
}

/// Cross-entropy for the head that produced `logits`. The pretraining loss
/// is the masked-LM mean plus, when present, the next-sentence mean.
pub fn loss<T: Real>(logits: &HeadLogits<T>, targets: &Targets) -> Result<LossOutput<T>> {
    match (logits, targets) {
        (HeadLogits::Pretrain { mlm, nsp }, Targets::Pretrain { mlm_labels, nsp_labels }) => {
            if mlm_labels.is_empty() {
                return Err(Error::Data("masked-LM loss needs at least one masked position".into()));
            }
            let labels: Vec<Option<u32>> = mlm_labels.iter().map(|&l| Some(l)).collect();
            let (mlm_loss, mlm_grad) = cross_entropy(mlm, &labels)?;
            let (nsp_loss, nsp_grad) = match (nsp, nsp_labels) {
                (Some(n), Some(l)) => {
                    let labels: Vec<Option<u32>> = l.iter().map(|&v| Some(v)).collect();
                    let (v, g) = cross_entropy(n, &labels)?;
                    (Some(v), Some(g))
                }
                (None, None) => (None, None),
                _ => return Err(Error::Shape("next-sentence logits and labels disagree".into())),
            };
            Ok(LossOutput {
                value: mlm_loss + nsp_loss.unwrap_or(0.0),
                mlm: Some(mlm_loss),
                nsp: nsp_loss,
                grad: HeadLogits::Pretrain {
                    mlm: mlm_grad,
                    nsp: nsp_grad,
                },
            })
        }
        (HeadLogits::Token(l), Targets::Token(labels)) => {
            let labels: Vec<Option<u32>> = labels
                .iter()
                .map(|&v| if v < 0 { None } else { Some(v as u32) })
                .collect();
            let (v, g) = cross_entropy(l, &labels)?;
            Ok(LossOutput {
                value: v,
                mlm: None,
                nsp: None,
                grad: HeadLogits::Token(g),
            })
        }
        (HeadLogits::Seq(l), Targets::Seq(labels)) => {
            let labels: Vec<Option<u32>> = labels.iter().map(|&v| Some(v)).collect();
            let (v, g) = cross_entropy(l, &labels)?;
            Ok(LossOutput {
                value: v,
                mlm: None,
                nsp: None,
                grad: HeadLogits::Seq(g),
            })
        }
        _ => Err(Error::Shape("targets do not match the head".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits() {
        let l = Logits {
            rows: 3,
            cols: 100,
            data: vec![0.0f64; 300],
        };
        let (v, _) = cross_entropy(&l, &[Some(1), Some(5), Some(99)]).unwrap();
        assert!((v - 100f64.ln()).abs() < 1e-12);
        assert!((v - 4.6052).abs() < 1e-4);
        let s = HeadLogits::Seq(Logits {
            rows: 2,
            cols: 3,
            data: vec![0.5f64; 6],
        });
        let out = loss(&s, &Targets::Seq(vec![0, 2])).unwrap();
        assert!((out.value - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn margin_drives_loss_to_zero() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 80.0] {
            let l = Logits {
                rows: 1,
                cols: 4,
                data: vec![margin, 0.0f64, 0.0, 0.0],
            };
            let (v, _) = cross_entropy(&l, &[Some(0)]).unwrap();
            assert!(v < prev && v >= 0.0);
            prev = v;
        }
        assert!(prev < 1e-30);
    }

    #[test]
    fn empty_masked_set_is_error() {
        let l = HeadLogits::Pretrain {
            mlm: Logits {
                rows: 0,
                cols: 10,
                data: Vec::<f32>::new(),
            },
            nsp: None,
        };
        let t = Targets::Pretrain {
            mlm_labels: vec![],
            nsp_labels: None,
        };
        assert!(loss(&l, &t).is_err());
        let tok = HeadLogits::Token(Logits {
            rows: 2,
            cols: 3,
            data: vec![0.0f32; 6],
        });
        assert!(loss(&tok, &Targets::Token(vec![IGNORE, IGNORE])).is_err());
    }
}
