//! Flat parameter storage. Every tensor lives in one contiguous buffer so
//! the optimizer, gradient checker and checkpoint code can treat the model
//! as a single vector.

use std::ops::Range;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, ModelError, Scalar};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }

    /// Matrices and embeddings get weight decay; gains and biases do not.
    pub fn decays(&self) -> bool {
        self.shape.len() == 2
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LnIdx {
    pub g: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnIdx {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct FfIdx {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct EncLayerIdx {
    pub ln1: LnIdx,
    pub attn: AttnIdx,
    pub ln2: LnIdx,
    pub ff: FfIdx,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct DecLayerIdx {
    pub ln1: LnIdx,
    pub self_attn: AttnIdx,
    pub ln2: LnIdx,
    pub cross: AttnIdx,
    pub ln3: LnIdx,
    pub ff: FfIdx,
}

/// Offsets of every tensor, plus the ordered tensor table.
#[derive(Clone, Debug)]
pub struct ParamLayout {
    pub tensors: Vec<TensorSpec>,
    pub(crate) tok_emb: usize,
    pub(crate) enc_pos: usize,
    pub(crate) dec_pos: usize,
    pub(crate) enc: Vec<EncLayerIdx>,
    pub(crate) enc_ln: LnIdx,
    pub(crate) dec: Vec<DecLayerIdx>,
    pub(crate) dec_ln: LnIdx,
    pub(crate) out_w: usize,
    pub(crate) out_b: usize,
    total: usize,
}

struct Builder {
    tensors: Vec<TensorSpec>,
    total: usize,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize]) -> usize {
        let offset = self.total;
        let spec = TensorSpec {
            name,
            shape: shape.to_vec(),
            offset,
        };
        self.total += spec.len();
        self.tensors.push(spec);
        offset
    }

    fn ln(&mut self, prefix: &str, d: usize) -> LnIdx {
        LnIdx {
            g: self.add(format!("{prefix}.g"), &[d]),
            b: self.add(format!("{prefix}.b"), &[d]),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIdx {
        AttnIdx {
            wq: self.add(format!("{prefix}.wq"), &[d, d]),
            wk: self.add(format!("{prefix}.wk"), &[d, d]),
            wv: self.add(format!("{prefix}.wv"), &[d, d]),
            wo: self.add(format!("{prefix}.wo"), &[d, d]),
        }
    }

    fn ff(&mut self, prefix: &str, d: usize, f: usize) -> FfIdx {
        FfIdx {
            w1: self.add(format!("{prefix}.w1"), &[d, f]),
            b1: self.add(format!("{prefix}.b1"), &[f]),
            w2: self.add(format!("{prefix}.w2"), &[f, d]),
            b2: self.add(format!("{prefix}.b2"), &[d]),
        }
    }
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
        let mut b = Builder {
            tensors: Vec::new(),
            total: 0,
        };
        let tok_emb = b.add("tok_emb".into(), &[v, d]);
        let enc_pos = b.add("enc_pos".into(), &[cfg.max_len, d]);
        let dec_pos = b.add("dec_pos".into(), &[cfg.max_target_len, d]);
        let enc = (0..cfg.layers_enc)
            .map(|l| EncLayerIdx {
                ln1: b.ln(&format!("enc.{l}.ln1"), d),
                attn: b.attn(&format!("enc.{l}.attn"), d),
                ln2: b.ln(&format!("enc.{l}.ln2"), d),
                ff: b.ff(&format!("enc.{l}.ff"), d, f),
            })
            .collect();
        let enc_ln = b.ln("enc.ln_f", d);
        let dec = (0..cfg.layers_dec)
            .map(|l| DecLayerIdx {
                ln1: b.ln(&format!("dec.{l}.ln1"), d),
                self_attn: b.attn(&format!("dec.{l}.self"), d),
                ln2: b.ln(&format!("dec.{l}.ln2"), d),
                cross: b.attn(&format!("dec.{l}.cross"), d),
                ln3: b.ln(&format!("dec.{l}.ln3"), d),
                ff: b.ff(&format!("dec.{l}.ff"), d, f),
            })
            .collect();
        let dec_ln = b.ln("dec.ln_f", d);
        let out_w = b.add("out.w".into(), &[d, v]);
        let out_b = b.add("out.b".into(), &[v]);
        Self {
            tensors: b.tensors,
            tok_emb,
            enc_pos,
            dec_pos,
            enc,
            enc_ln,
            dec,
            dec_ln,
            out_w,
            out_b,
            total: b.total,
        }
    }

    pub fn num_params(&self) -> usize {
        self.total
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Tensor containing flat index `i`.
    pub fn tensor_of(&self, i: usize) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.range().contains(&i))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Seeded Gaussian weights, unit layer-norm gains.
    Random,
    /// Every parameter zero: the model outputs constant logits.
    Zeros,
}

/// Parameters, optimizer moments and step counter.
#[derive(Clone, Debug)]
pub struct ModelState<T> {
    pub config: ModelConfig,
    pub layout: Arc<ParamLayout>,
    pub params: Vec<T>,
    pub adam_m: Vec<T>,
    pub adam_v: Vec<T>,
    pub step: u64,
}

impl<T: Scalar> ModelState<T> {
    pub fn new(config: ModelConfig, init: Init) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Arc::new(ParamLayout::new(&config));
        let n = layout.num_params();
        let mut params = vec![T::zero(); n];
        if init == Init::Random {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            for spec in &layout.tensors {
                let slot = &mut params[spec.range()];
                let name = spec.name.as_str();
                if name.ends_with(".g") {
                    slot.fill(T::one());
                } else if spec.shape.len() == 1 {
                    // biases stay zero
                } else {
                    let std = if name.ends_with("emb") || name.ends_with("pos") {
                        0.5
                    } else {
                        1.0 / (spec.shape[0] as f64).sqrt()
                    };
                    let normal = Normal::new(0.0, std).expect("positive std");
                    for x in slot.iter_mut() {
                        *x = T::of(normal.sample(&mut rng));
                    }
                }
            }
        }
        Ok(Self {
            config,
            adam_m: vec![T::zero(); n],
            adam_v: vec![T::zero(); n],
            params,
            layout,
            step: 0,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        self.layout.tensor(name).map(|s| &self.params[s.range()])
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|x| x.is_finite())
    }

    /// Same model in another precision; optimizer state is carried over.
    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::of(x.f64())).collect();
        ModelState {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: conv(&self.params),
            adam_m: conv(&self.adam_m),
            adam_v: conv(&self.adam_v),
            step: self.step,
        }
    }
}
