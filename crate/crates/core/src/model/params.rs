use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{HeadKind, ModelConfig, Real};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Array<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Named parameter (or gradient, or moment) arrays in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    pub arrays: Vec<Array<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn zeros_like(&self) -> Self {
        ParamSet {
            arrays: self
                .arrays
                .iter()
                .map(|a| Array {
                    name: a.name.clone(),
                    shape: a.shape.clone(),
                    data: vec![T::zero(); a.data.len()],
                })
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Array<T>> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn num_values(&self) -> usize {
        self.arrays.iter().map(|a| a.data.len()).sum()
    }

    pub fn scale(&mut self, c: T) {
        for a in &mut self.arrays {
            for v in &mut a.data {
                *v *= c;
            }
        }
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            arrays: self
                .arrays
                .iter()
                .map(|a| Array {
                    name: a.name.clone(),
                    shape: a.shape.clone(),
                    data: a.data.iter().map(|&v| U::c(v.f64())).collect(),
                })
                .collect(),
        }
    }

    /// First array holding a NaN or infinity, if any.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.arrays
            .iter()
            .find(|a| a.data.iter().any(|v| !v.is_finite()))
            .map(|a| a.name.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LayerLayout {
    pub q_w: usize,
    pub q_b: usize,
    pub k_w: usize,
    pub k_b: usize,
    pub v_w: usize,
    pub v_b: usize,
    pub o_w: usize,
    pub o_b: usize,
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub ff1_w: usize,
    pub ff1_b: usize,
    pub ff2_w: usize,
    pub ff2_b: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum HeadLayout {
    Pretrain {
        t_w: usize,
        t_b: usize,
        ln_g: usize,
        ln_b: usize,
        out_b: usize,
        out_w: Option<usize>,
        nsp: Option<(usize, usize)>,
    },
    Classifier {
        w: usize,
        b: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layout {
    pub tok: usize,
    pub pos: usize,
    pub seg: usize,
    pub emb_ln_g: usize,
    pub emb_ln_b: usize,
    pub layers: Vec<LayerLayout>,
    pub pool_w: usize,
    pub pool_b: usize,
    pub head: HeadLayout,
}

pub(crate) struct ArraySpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Names starting with these prefixes belong to a task head rather than the body.
pub(crate) const HEAD_PREFIXES: [&str; 3] = ["mlm.", "nsp.", "classifier."];

pub fn is_head_array(name: &str) -> bool {
    HEAD_PREFIXES.iter().any(|p| name.starts_with(p))
}

pub(crate) fn build_layout(c: &ModelConfig, head: &HeadKind) -> (Layout, Vec<ArraySpec>) {
    let mut specs: Vec<ArraySpec> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| {
        specs.push(ArraySpec { name, shape, init });
        specs.len() - 1
    };
    let (h, f) = (c.hidden, c.ff_dim);
    let tok = push("embeddings.token".into(), vec![c.vocab_size, h], Init::Normal);
    let pos = push("embeddings.position".into(), vec![c.max_positions, h], Init::Normal);
    let seg = push("embeddings.segment".into(), vec![c.type_vocab, h], Init::Normal);
    let emb_ln_g = push("embeddings.ln.gain".into(), vec![h], Init::Ones);
    let emb_ln_b = push("embeddings.ln.bias".into(), vec![h], Init::Zeros);
    let mut layers = Vec::with_capacity(c.layers);
    for l in 0..c.layers {
        let p = |s: &str| format!("layer.{l}.{s}");
        layers.push(LayerLayout {
            q_w: push(p("attn.query.weight"), vec![h, h], Init::Normal),
            q_b: push(p("attn.query.bias"), vec![h], Init::Zeros),
            k_w: push(p("attn.key.weight"), vec![h, h], Init::Normal),
            k_b: push(p("attn.key.bias"), vec![h], Init::Zeros),
            v_w: push(p("attn.value.weight"), vec![h, h], Init::Normal),
            v_b: push(p("attn.value.bias"), vec![h], Init::Zeros),
            o_w: push(p("attn.output.weight"), vec![h, h], Init::Normal),
            o_b: push(p("attn.output.bias"), vec![h], Init::Zeros),
            ln1_g: push(p("attn.ln.gain"), vec![h], Init::Ones),
            ln1_b: push(p("attn.ln.bias"), vec![h], Init::Zeros),
            ff1_w: push(p("ffn.inner.weight"), vec![h, f], Init::Normal),
            ff1_b: push(p("ffn.inner.bias"), vec![f], Init::Zeros),
            ff2_w: push(p("ffn.output.weight"), vec![f, h], Init::Normal),
            ff2_b: push(p("ffn.output.bias"), vec![h], Init::Zeros),
            ln2_g: push(p("ffn.ln.gain"), vec![h], Init::Ones),
            ln2_b: push(p("ffn.ln.bias"), vec![h], Init::Zeros),
        });
    }
    let pool_w = push("pooler.weight".into(), vec![h, h], Init::Normal);
    let pool_b = push("pooler.bias".into(), vec![h], Init::Zeros);
    let head = match *head {
        HeadKind::Pretrain { nsp } => HeadLayout::Pretrain {
            t_w: push("mlm.transform.weight".into(), vec![h, h], Init::Normal),
            t_b: push("mlm.transform.bias".into(), vec![h], Init::Zeros),
            ln_g: push("mlm.ln.gain".into(), vec![h], Init::Ones),
            ln_b: push("mlm.ln.bias".into(), vec![h], Init::Zeros),
            out_b: push("mlm.output.bias".into(), vec![c.vocab_size], Init::Zeros),
            out_w: (!c.tie_mlm_output)
                .then(|| push("mlm.output.weight".into(), vec![h, c.vocab_size], Init::Normal)),
            nsp: nsp.then(|| {
                (
                    push("nsp.weight".into(), vec![h, 2], Init::Normal),
                    push("nsp.bias".into(), vec![2], Init::Zeros),
                )
            }),
        },
        HeadKind::TokenClassify { classes } | HeadKind::SeqClassify { classes } => HeadLayout::Classifier {
            w: push("classifier.weight".into(), vec![h, classes], Init::Normal),
            b: push("classifier.bias".into(), vec![classes], Init::Zeros),
        },
    };
    (
        Layout {
            tok,
            pos,
            seg,
            emb_ln_g,
            emb_ln_b,
            layers,
            pool_w,
            pool_b,
            head,
        },
        specs,
    )
}

/// Truncated normal draw: resampled until within two standard deviations.
fn truncated_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

fn init_array<T: Real>(spec: &ArraySpec, std: f64, rng: &mut ChaCha8Rng) -> Array<T> {
    let n: usize = spec.shape.iter().product();
    let data = match spec.init {
        Init::Zeros => vec![T::zero(); n],
        Init::Ones => vec![T::one(); n],
        Init::Normal => (0..n).map(|_| T::c(truncated_normal(rng, std))).collect(),
    };
    Array {
        name: spec.name.clone(),
        shape: spec.shape.clone(),
        data,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub head: HeadKind,
    pub params: ParamSet<T>,
    pub(crate) layout: Layout,
}

impl<T: Real> Model<T> {
    /// Fresh model: truncated-normal weights (std `init_std`), zero biases,
    /// unit layer-norm gains.
    pub fn new(config: ModelConfig, head: HeadKind, seed: u64) -> Result<Self> {
        config.validate()?;
        if let Some(0) = head.classes() {
            return Err(Error::Config("classifier needs at least one class".into()));
        }
        let (layout, specs) = build_layout(&config, &head);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arrays = specs
            .iter()
            .map(|s| init_array(s, config.init_std, &mut rng))
            .collect();
        Ok(Model {
            config,
            head,
            params: ParamSet { arrays },
            layout,
        })
    }

    /// Wraps existing arrays, checking names and shapes against the layout.
    pub fn from_params(config: ModelConfig, head: HeadKind, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build_layout(&config, &head);
        if specs.len() != params.arrays.len() {
            return Err(Error::Shape(format!(
                "expected {} arrays, found {}",
                specs.len(),
                params.arrays.len()
            )));
        }
        for (s, a) in specs.iter().zip(&params.arrays) {
            let n: usize = s.shape.iter().product();
            if s.name != a.name || s.shape != a.shape || a.data.len() != n {
                return Err(Error::Shape(format!(
                    "array {} {:?} does not match expected {} {:?}",
                    a.name, a.shape, s.name, s.shape
                )));
            }
        }
        Ok(Model {
            config,
            head,
            params,
            layout,
        })
    }

    /// Same body with a different head. Matching head arrays are kept; all
    /// others are initialized fresh from `seed`.
    pub fn with_head(&self, head: HeadKind, seed: u64) -> Result<Self> {
        let fresh = Model::<T>::new(self.config.clone(), head, seed)?;
        let arrays = fresh
            .params
            .arrays
            .into_iter()
            .map(|a| {
                let keep = !is_head_array(&a.name) || self.head == head;
                match self.params.get(&a.name) {
                    Some(old) if keep && old.shape == a.shape => old.clone(),
                    _ => a,
                }
            })
            .collect();
        Model::from_params(self.config.clone(), head, ParamSet { arrays })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            head: self.head,
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    pub(crate) fn p(&self, idx: usize) -> &[T] {
        &self.params.arrays[idx].data
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_statistics() {
        let m = Model::<f64>::new(ModelConfig::default(), HeadKind::Pretrain { nsp: true }, 1).unwrap();
        let tok = &m.params.arrays[m.layout.tok].data;
        let mean = tok.iter().sum::<f64>() / tok.len() as f64;
        let std = (tok.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / tok.len() as f64).sqrt();
        assert!(mean.abs() < 1e-3);
        // truncation at two sigma shrinks the standard deviation to about 0.88 sigma
        assert!((std - 0.02 * 0.8796).abs() < 5e-4, "std {std}");
        assert!(tok.iter().all(|v| v.abs() <= 0.04));
        let g = m.params.get("layer.0.attn.ln.gain").unwrap();
        assert!(g.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn head_swap_keeps_body() {
        let m = Model::<f32>::new(ModelConfig::tiny(), HeadKind::Pretrain { nsp: true }, 1).unwrap();
        let t = m.with_head(HeadKind::TokenClassify { classes: 7 }, 9).unwrap();
        assert_eq!(t.params.get("embeddings.token"), m.params.get("embeddings.token"));
        assert_eq!(t.params.get("classifier.weight").unwrap().shape, vec![16, 7]);
        assert!(t.params.get("classifier.bias").unwrap().data.iter().all(|&v| v == 0.0));
        assert!(t.params.get("mlm.transform.weight").is_none());
    }

    #[test]
    fn rejects_bad_config() {
        let c = ModelConfig {
            heads: 3,
            ..ModelConfig::tiny()
        };
        assert!(Model::<f32>::new(c, HeadKind::SeqClassify { classes: 3 }, 0).is_err());
    }
}
