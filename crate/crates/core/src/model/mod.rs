//! Toy multimodal decoder.
//!
//! Layout of one sequence: `[vision tokens | prompt | response]`. Vision
//! tokens come from a linear patch embedding followed by either the full
//! two-layer MLP projector (teacher) or adaptive 2-D pooling then the MLP
//! (student). The decoder is a stack of pre-norm causal attention blocks with
//! learned absolute positions and an untied LM head.

mod config;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub use config::{ModelConfig, Role};

use crate::data::SyntheticExample;
use crate::error::{Error, Result};
use crate::numerics::{Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy)]
enum Init {
    /// N(0, 1) / sqrt(fan_in) with fan_in the first dimension.
    Linear,
    /// N(0, 1) / sqrt(hidden_dim).
    Embedding,
    Ones,
    Zeros,
}

fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.hidden_dim;
    let mut v = vec![
        ("vision.patch_proj".to_string(), vec![cfg.patch_dim, d], Init::Linear),
        ("vision.mlp.fc1".to_string(), vec![d, d], Init::Linear),
        ("vision.mlp.fc2".to_string(), vec![d, d], Init::Linear),
        ("embed.tokens".to_string(), vec![cfg.vocab_size, d], Init::Embedding),
        ("embed.positions".to_string(), vec![cfg.max_seq_len, d], Init::Embedding),
    ];
    for l in 0..cfg.num_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        v.extend([
            (p("ln1.gain"), vec![d], Init::Ones),
            (p("ln1.bias"), vec![d], Init::Zeros),
            (p("attn.wq"), vec![d, d], Init::Linear),
            (p("attn.wk"), vec![d, d], Init::Linear),
            (p("attn.wv"), vec![d, d], Init::Linear),
            (p("attn.wo"), vec![d, d], Init::Linear),
            (p("ln2.gain"), vec![d], Init::Ones),
            (p("ln2.bias"), vec![d], Init::Zeros),
            (p("mlp.fc1"), vec![d, d * cfg.mlp_ratio], Init::Linear),
            (p("mlp.fc2"), vec![d * cfg.mlp_ratio, d], Init::Linear),
        ]);
    }
    v.extend([
        ("final_ln.gain".to_string(), vec![d], Init::Ones),
        ("final_ln.bias".to_string(), vec![d], Init::Zeros),
        ("lm_head".to_string(), vec![d, cfg.vocab_size], Init::Linear),
    ]);
    v
}

/// Named parameter tensors of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor>,
}

impl ModelParameters {
    /// Seeded initialization; identical `(config, seed)` gives identical bits.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape, init) in layout(config) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = match init {
                Init::Linear => {
                    let s = 1.0 / (shape[0] as f64).sqrt();
                    (0..n).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect()
                }
                Init::Embedding => {
                    let s = 1.0 / (config.hidden_dim as f64).sqrt();
                    (0..n).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect()
                }
                Init::Ones => vec![1.0; n],
                Init::Zeros => vec![0.0; n],
            };
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    /// Rebuilds parameters from named tensors, checking every shape.
    pub fn from_tensors(config: &ModelConfig, mut tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let mut out = BTreeMap::new();
        for (name, shape, _) in layout(config) {
            let t = tensors
                .remove(&name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, config expects {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Config(format!("parameter {name} is not finite")));
            }
            out.insert(name, t);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Config(format!("unexpected parameter {extra}")));
        }
        Ok(Self {
            config: config.clone(),
            tensors: out,
        })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Registers every tensor on `tape`; trainable unless the tape is in
    /// inference mode.
    pub fn bind<'p>(&'p self, tape: &Tape) -> BoundModel<'p> {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), tape.param(t.clone())))
            .collect();
        BoundModel {
            config: &self.config,
            vars,
        }
    }

    /// Teacher-forced forward on a fresh inference tape.
    pub fn forward(&self, example: &SyntheticExample) -> Result<ModelOutputs> {
        let tape = Tape::inference();
        self.bind(&tape).forward(&tape, example)
    }

    pub fn lm_head(&self, hidden: &Tensor) -> Result<Tensor> {
        let tape = Tape::inference();
        let h = tape.constant(hidden.clone());
        Ok(self.bind(&tape).lm_head(&tape, &h)?.to_tensor())
    }

    /// Greedy decoding from the prompt. Stops after EOS or `max_len` tokens;
    /// argmax ties go to the lowest id.
    pub fn greedy_decode(
        &self,
        patch_grid: &Tensor,
        prompt_ids: &[usize],
        max_len: usize,
        eos: usize,
    ) -> Result<Vec<usize>> {
        let tape = Tape::inference();
        let model = self.bind(&tape);
        let mut text = prompt_ids.to_vec();
        let mut out = Vec::new();
        while out.len() < max_len {
            let hidden = model.hidden_states(&tape, patch_grid, &text)?;
            let n = hidden.shape()[0];
            let last = tape.slice_rows(&hidden, n - 1, n)?;
            let logits = model.lm_head(&tape, &last)?;
            let next = argmax(logits.value().row(0));
            out.push(next);
            if next == eos {
                break;
            }
            text.push(next);
        }
        Ok(out)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Parameters registered on a particular tape.
pub struct BoundModel<'p> {
    config: &'p ModelConfig,
    vars: BTreeMap<String, Var>,
}

/// Segmented views of one forward pass.
#[derive(Clone, Debug)]
pub struct ModelOutputs {
    /// Final-layer hidden states at vision positions, `[N_v, D]`.
    pub vision_hidden: Var,
    /// Final-layer hidden states at text positions, `[N_text, D]`.
    pub language_hidden: Var,
    /// `lm_head(vision_hidden)`, `[N_v, V]`.
    pub vision_logits: Var,
    /// `lm_head(language_hidden)`: row `t` predicts text token `t + 1`.
    /// Response rows are the ones whose label is not ignored.
    pub response_logits: Var,
    pub full_hidden: Var,
}

impl BoundModel<'_> {
    pub fn config(&self) -> &ModelConfig {
        self.config
    }

    pub fn var(&self, name: &str) -> &Var {
        &self.vars[name]
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    /// Per-name gradients, zero-filled for parameters the loss never reached.
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), grads.get_or_zeros(v)))
            .collect()
    }

    fn linear(&self, tape: &Tape, x: &Var, name: &str) -> Result<Var> {
        tape.matmul(x, self.var(name))
    }

    /// Patch grid `[H, W, P]` to vision tokens `[N_v, D]`.
    pub fn project_vision(&self, tape: &Tape, patch_grid: &Tensor) -> Result<Var> {
        let cfg = self.config;
        let [ph, pw] = cfg.patch_grid;
        if patch_grid.shape() != [ph, pw, cfg.patch_dim] {
            return Err(Error::shape(
                "project_vision",
                patch_grid.shape(),
                &[ph, pw, cfg.patch_dim],
            ));
        }
        let patches = tape.constant(patch_grid.reshape(vec![ph * pw, cfg.patch_dim])?);
        let mut x = self.linear(tape, &patches, "vision.patch_proj")?;
        if cfg.role == Role::Student {
            let d = cfg.hidden_dim;
            let grid = tape.reshape(&x, vec![ph, pw, d])?;
            let [vh, vw] = cfg.vision_tokens_out;
            let pooled = tape.adaptive_avg_pool_2d(&grid, (vh, vw))?;
            x = tape.reshape(&pooled, vec![vh * vw, d])?;
        }
        let h = self.linear(tape, &x, "vision.mlp.fc1")?;
        let h = tape.gelu(&h)?;
        self.linear(tape, &h, "vision.mlp.fc2")
    }

    pub fn lm_head(&self, tape: &Tape, hidden: &Var) -> Result<Var> {
        if hidden.value().last_dim() != self.config.hidden_dim {
            return Err(Error::shape(
                "lm_head",
                hidden.shape(),
                &[self.config.hidden_dim, self.config.vocab_size],
            ));
        }
        self.linear(tape, hidden, "lm_head")
    }

    fn block(&self, tape: &Tape, x: &Var, layer: usize) -> Result<Var> {
        let p = |s: &str| format!("layers.{layer}.{s}");
        let h = tape.layer_norm(x, self.var(&p("ln1.gain")), self.var(&p("ln1.bias")))?;
        let q = self.linear(tape, &h, &p("attn.wq"))?;
        let k = self.linear(tape, &h, &p("attn.wk"))?;
        let v = self.linear(tape, &h, &p("attn.wv"))?;
        let a = tape.causal_attention(&q, &k, &v, self.config.num_heads)?;
        let a = self.linear(tape, &a, &p("attn.wo"))?;
        let x = tape.add(x, &a)?;
        let h = tape.layer_norm(&x, self.var(&p("ln2.gain")), self.var(&p("ln2.bias")))?;
        let h = self.linear(tape, &h, &p("mlp.fc1"))?;
        let h = tape.gelu(&h)?;
        let h = self.linear(tape, &h, &p("mlp.fc2"))?;
        tape.add(&x, &h)
    }

    /// Final-norm hidden states for `[vision | text_ids]`.
    pub fn hidden_states(&self, tape: &Tape, patch_grid: &Tensor, text_ids: &[usize]) -> Result<Var> {
        let cfg = self.config;
        let n = cfg.vision_tokens() + text_ids.len();
        if n > cfg.max_seq_len {
            return Err(Error::invalid(
                "forward",
                format!("sequence length {n} exceeds max_seq_len {}", cfg.max_seq_len),
            ));
        }
        let vision = self.project_vision(tape, patch_grid)?;
        let text = tape.embedding(self.var("embed.tokens"), text_ids)?;
        let x = tape.concat_rows(&[&vision, &text])?;
        let pos = tape.slice_rows(self.var("embed.positions"), 0, n)?;
        let mut x = tape.add(&x, &pos)?;
        for layer in 0..cfg.num_layers {
            x = self.block(tape, &x, layer)?;
        }
        tape.layer_norm(&x, self.var("final_ln.gain"), self.var("final_ln.bias"))
    }

    /// Teacher-forced forward pass over one example.
    pub fn forward(&self, tape: &Tape, example: &SyntheticExample) -> Result<ModelOutputs> {
        self.forward_tokens(tape, &example.patch_grid, &example.text_ids())
    }

    pub fn forward_tokens(
        &self,
        tape: &Tape,
        patch_grid: &Tensor,
        text_ids: &[usize],
    ) -> Result<ModelOutputs> {
        let full = self.hidden_states(tape, patch_grid, text_ids)?;
        let nv = self.config.vision_tokens();
        let n = full.shape()[0];
        let vision_hidden = tape.slice_rows(&full, 0, nv)?;
        let language_hidden = tape.slice_rows(&full, nv, n)?;
        let vision_logits = self.lm_head(tape, &vision_hidden)?;
        let response_logits = self.lm_head(tape, &language_hidden)?;
        Ok(ModelOutputs {
            vision_hidden,
            language_hidden,
            vision_logits,
            response_logits,
            full_hidden: full,
        })
    }
}

/// Per vision token, the `k` highest-logit `(token, logit)` pairs in
/// descending order; ties go to the lower token id.
pub fn decode_vision_tokens(
    params: &ModelParameters,
    example: &SyntheticExample,
    k: usize,
) -> Result<Vec<Vec<(usize, f64)>>> {
    let v = params.config.vocab_size;
    if k > v {
        return Err(Error::invalid(
            "decode_vision_tokens",
            format!("k = {k} exceeds vocabulary {v}"),
        ));
    }
    let tape = Tape::inference();
    let model = params.bind(&tape);
    let hidden = model.hidden_states(&tape, &example.patch_grid, &example.prompt_ids)?;
    let vision = tape.slice_rows(&hidden, 0, params.config.vision_tokens())?;
    let logits = model.lm_head(&tape, &vision)?;
    let logits = logits.value();
    Ok((0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut ids: Vec<usize> = (0..v).collect();
            ids.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            ids.truncate(k);
            ids.into_iter().map(|i| (i, row[i])).collect()
        })
        .collect())
}
