//! Toy latent editor.
//!
//! A per-token residual network applied independently to each latent row,
//! with an instruction embedding added per row:
//!
//! ```text
//! h0  = in_proj [z; r] + embed[y]
//! h1  = h0 + w2 tanh(w1 h0 + b1)
//! out = out_proj h1 + out_bias
//! ```
//!
//! `z` is the noised half of the stacked input and `r` the clean half. The base
//! denoiser is the same network without the clean half or instruction embedding.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{stack_input, EditorConfig, EditorInit, LatentEditor, StackedInput};
use crate::container::{read_tensors, take_2d, write_atomic, write_tensors};
use crate::error::{Error, Result};
use crate::latent::{EditInstruction, Latent};
use crate::optim::ParamSet;
use crate::rng::{gaussian2, seeded};
use crate::schedule::NoiseSchedule;

pub const ARCHITECTURE: &str = "toy-token-mlp-v1";
const MANIFEST: &str = "manifest.json";
const PARAMS: &str = "params.safetensors";

/// `x w^T` with a fixed summation order, so adding zero columns never changes a result.
fn linear(x: ArrayView2<f64>, w: ArrayView2<f64>) -> Array2<f64> {
    let (n, k) = x.dim();
    let (m, k2) = w.dim();
    debug_assert_eq!(k, k2);
    let mut out = Array2::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for p in 0..k {
                acc += x[[i, p]] * w[[j, p]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

fn add_row(mut x: Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    x += &b.row(0);
    x
}

fn embed_name(idx: usize) -> String {
    format!("embed.{idx:03}")
}

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let n = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_fn((rows, cols), |_| n.sample(rng))
}

/// Runs the shared trunk after the input projection.
fn trunk(p: &ParamSet, h0: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
    let u = add_row(linear(h0.view(), p.get("w1")?.view()), p.get("b1")?);
    let a = u.mapv(f64::tanh);
    let h1 = h0 + &linear(a.view(), p.get("w2")?.view());
    let out = add_row(linear(h1.view(), p.get("out_proj")?.view()), p.get("out_bias")?);
    Ok((a, h1, out))
}

/// Base denoiser on the noised half alone; predicts the clean latent.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiser {
    params: ParamSet,
}

impl ToyDenoiser {
    /// Identity map: `in_proj = [I; 0]`, `out_proj = [I 0]`, `w2 = 0`.
    pub fn identity(channels: usize, d_model: usize, hidden: usize, seed: u64) -> Result<Self> {
        if d_model < channels {
            return Err(Error::Init(format!("d_model {d_model} < latent channels {channels}")));
        }
        let mut rng = seeded(seed);
        let mut p = ParamSet::new();
        let mut in_proj = Array2::zeros((d_model, channels));
        let mut out_proj = Array2::zeros((channels, d_model));
        for c in 0..channels {
            in_proj[[c, c]] = 1.0;
            out_proj[[c, c]] = 1.0;
        }
        p.insert("in_proj", in_proj);
        p.insert("w1", random_matrix(&mut rng, hidden, d_model, 1.0 / (d_model as f64).sqrt()));
        p.insert("b1", Array2::zeros((1, hidden)));
        p.insert("w2", Array2::zeros((d_model, hidden)));
        p.insert("out_proj", out_proj);
        p.insert("out_bias", Array2::zeros((1, channels)));
        Ok(Self { params: p })
    }

    pub fn from_params(params: ParamSet) -> Result<Self> {
        let d = Self { params };
        d.dims()?;
        Ok(d)
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// `(channels, d_model, hidden)`, validated across all arrays.
    pub fn dims(&self) -> Result<(usize, usize, usize)> {
        let p = &self.params;
        let (d, c) = p.get("in_proj")?.dim();
        let (h, d1) = p.get("w1")?.dim();
        let ok = d1 == d
            && p.get("b1")?.dim() == (1, h)
            && p.get("w2")?.dim() == (d, h)
            && p.get("out_proj")?.dim() == (c, d)
            && p.get("out_bias")?.dim() == (1, c);
        if ok {
            Ok((c, d, h))
        } else {
            Err(Error::Init("inconsistent base denoiser shapes".into()))
        }
    }

    pub fn forward(&self, noised: &Array2<f64>) -> Result<Array2<f64>> {
        let h0 = linear(noised.view(), self.params.get("in_proj")?.view());
        Ok(trunk(&self.params, &h0)?.2)
    }
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    x: Array2<f64>,
    h0: Array2<f64>,
    a: Array2<f64>,
    h1: Array2<f64>,
    instruction: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub architecture: String,
    pub codec_id: String,
    pub latent_shape: (usize, usize),
    pub tau: usize,
    pub instructions: Vec<EditInstruction>,
    pub train_config_hash: Option<String>,
    pub editor: EditorConfig,
    pub schedule: NoiseSchedule,
    pub params_sha256: String,
    pub epoch: Option<usize>,
}

impl CheckpointManifest {
    pub fn parse(json: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(json)?;
        if m.architecture != ARCHITECTURE {
            return Err(Error::Format(format!("unknown architecture {:?}", m.architecture)));
        }
        if m.instructions.is_empty() {
            return Err(Error::Format("checkpoint lists no instructions".into()));
        }
        Ok(m)
    }
}

pub struct ToyEditor {
    cfg: EditorConfig,
    schedule: NoiseSchedule,
    codec_id: String,
    latent_shape: (usize, usize),
    instructions: Vec<EditInstruction>,
    params: ParamSet,
    forward_calls: AtomicUsize,
}

impl std::fmt::Debug for ToyEditor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ToyEditor")
            .field("codec_id", &self.codec_id)
            .field("latent_shape", &self.latent_shape)
            .field("instructions", &self.instructions.len())
            .finish_non_exhaustive()
    }
}

impl Clone for ToyEditor {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            schedule: self.schedule.clone(),
            codec_id: self.codec_id.clone(),
            latent_shape: self.latent_shape,
            instructions: self.instructions.clone(),
            params: self.params.clone(),
            forward_calls: AtomicUsize::new(0),
        }
    }
}

fn check_instructions(instructions: &[EditInstruction]) -> Result<()> {
    if instructions.is_empty() {
        return Err(Error::Init("editor needs at least one instruction".into()));
    }
    for (i, a) in instructions.iter().enumerate() {
        if instructions[..i].iter().any(|b| b.text() == a.text()) {
            return Err(Error::Init(format!("duplicate instruction {:?}", a.text())));
        }
    }
    Ok(())
}

impl ToyEditor {
    /// Expands the base input projection to the stacked input; the new
    /// columns and the instruction embeddings start at zero.
    pub fn init_from_pretrained(
        base: &ToyDenoiser,
        cfg: EditorConfig,
        schedule: NoiseSchedule,
        codec_id: impl Into<String>,
        latent_shape: (usize, usize),
        instructions: Vec<EditInstruction>,
    ) -> Result<Self> {
        cfg.validate()?;
        check_instructions(&instructions)?;
        let (c, d, _) = base.dims()?;
        if c != latent_shape.1 {
            return Err(Error::Init(format!(
                "base denoiser has {c} channels, latent has {}",
                latent_shape.1
            )));
        }
        schedule.at(cfg.tau)?;
        let mut params = base.params.clone();
        let mut in_proj = Array2::zeros((d, 2 * c));
        in_proj.slice_mut(s![.., ..c]).assign(base.params.get("in_proj")?);
        params.insert("in_proj", in_proj);
        for i in 0..instructions.len() {
            params.insert(embed_name(i), Array2::zeros((latent_shape.0, d)));
        }
        Ok(Self {
            cfg,
            schedule,
            codec_id: codec_id.into(),
            latent_shape,
            instructions,
            params,
            forward_calls: AtomicUsize::new(0),
        })
    }

    /// Ablation: every weight drawn at random.
    pub fn init_random(
        cfg: EditorConfig,
        schedule: NoiseSchedule,
        codec_id: impl Into<String>,
        latent_shape: (usize, usize),
        instructions: Vec<EditInstruction>,
    ) -> Result<Self> {
        cfg.validate()?;
        check_instructions(&instructions)?;
        schedule.at(cfg.tau)?;
        let (rows, c) = latent_shape;
        let (d, h) = (cfg.d_model, cfg.hidden);
        let mut rng = seeded(cfg.init_seed);
        let mut p = ParamSet::new();
        p.insert("in_proj", random_matrix(&mut rng, d, 2 * c, 1.0 / (2.0 * c as f64).sqrt()));
        p.insert("w1", random_matrix(&mut rng, h, d, 1.0 / (d as f64).sqrt()));
        p.insert("b1", Array2::zeros((1, h)));
        p.insert("w2", random_matrix(&mut rng, d, h, 1.0 / (h as f64).sqrt()));
        p.insert("out_proj", random_matrix(&mut rng, c, d, 1.0 / (d as f64).sqrt()));
        p.insert("out_bias", Array2::zeros((1, c)));
        for i in 0..instructions.len() {
            p.insert(embed_name(i), random_matrix(&mut rng, rows, d, 0.1));
        }
        Ok(Self {
            cfg,
            schedule,
            codec_id: codec_id.into(),
            latent_shape,
            instructions,
            params: p,
            forward_calls: AtomicUsize::new(0),
        })
    }

    /// Dispatches on `cfg.init`, building the identity base when needed.
    pub fn init(
        cfg: EditorConfig,
        schedule: NoiseSchedule,
        codec_id: impl Into<String>,
        latent_shape: (usize, usize),
        instructions: Vec<EditInstruction>,
    ) -> Result<Self> {
        match cfg.init {
            EditorInit::Pretrained => {
                let base = ToyDenoiser::identity(latent_shape.1, cfg.d_model, cfg.hidden, cfg.init_seed)?;
                Self::init_from_pretrained(&base, cfg, schedule, codec_id, latent_shape, instructions)
            }
            EditorInit::Random => Self::init_random(cfg, schedule, codec_id, latent_shape, instructions),
        }
    }

    pub fn config(&self) -> &EditorConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn instruction_index(&self, text: &str) -> Result<usize> {
        self.instructions.iter().position(|i| i.text() == text).ok_or_else(|| {
            let known: Vec<_> = self.instructions.iter().map(|i| i.text()).collect();
            Error::Instruction(format!("{text:?} is not a trained instruction (known: {known:?})"))
        })
    }

    fn check_stacked(&self, x: &StackedInput) -> Result<()> {
        if x.noised.dim() != self.latent_shape || x.clean.dim() != self.latent_shape {
            return Err(Error::shape(self.latent_shape, (x.noised.dim(), x.clean.dim())));
        }
        Ok(())
    }

    pub fn forward(&self, x: &StackedInput, instruction: usize) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_stacked(x)?;
        let embed = self.params.get(&embed_name(instruction))?;
        let xc = x.concat();
        let h0 = linear(xc.view(), self.params.get("in_proj")?.view()) + embed;
        let (a, h1, out) = trunk(&self.params, &h0)?;
        Ok((
            out,
            ForwardCache {
                x: xc,
                h0,
                a,
                h1,
                instruction,
            },
        ))
    }

    /// Parameter gradients for an upstream gradient on the output.
    pub fn backward(&self, g: &Array2<f64>, cache: &ForwardCache) -> Result<ParamSet> {
        if g.dim() != self.latent_shape {
            return Err(Error::shape(self.latent_shape, g.dim()));
        }
        let p = &self.params;
        let mut grads = p.zeros_like();
        let out_proj = p.get("out_proj")?;
        let w2 = p.get("w2")?;
        let w1 = p.get("w1")?;
        *grads.get_mut("out_proj")? = g.t().dot(&cache.h1);
        *grads.get_mut("out_bias")? = g.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0));
        let gh1 = g.dot(out_proj);
        *grads.get_mut("w2")? = gh1.t().dot(&cache.a);
        let mut gu = gh1.dot(w2);
        gu.zip_mut_with(&cache.a, |v, &a| *v *= 1.0 - a * a);
        *grads.get_mut("w1")? = gu.t().dot(&cache.h0);
        *grads.get_mut("b1")? = gu.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0));
        let gh0 = gh1 + gu.dot(w1);
        *grads.get_mut("in_proj")? = gh0.t().dot(&cache.x);
        *grads.get_mut(&embed_name(cache.instruction))? = gh0;
        Ok(grads)
    }

    pub fn stacked(&self, r_src: &Latent, eps: &Array2<f64>) -> Result<StackedInput> {
        r_src.check_shape(self.latent_shape)?;
        stack_input(r_src, eps, &self.schedule, self.cfg.tau)
    }

    /// One forward pass with caller-provided noise.
    pub fn edit_with_eps(&self, r_src: &Latent, instruction: &str, eps: &Array2<f64>) -> Result<Latent> {
        let idx = self.instruction_index(instruction)?;
        let x = self.stacked(r_src, eps)?;
        self.forward_calls.fetch_add(1, Ordering::SeqCst);
        let (out, _) = self.forward(&x, idx)?;
        Latent::new(out, self.codec_id.clone())
    }

    pub fn inference_noise(&self) -> Array2<f64> {
        gaussian2(&mut seeded(self.cfg.inference_seed), self.latent_shape.0, self.latent_shape.1)
    }

    pub fn manifest(&self, train_config_hash: Option<String>, epoch: Option<usize>) -> CheckpointManifest {
        CheckpointManifest {
            architecture: ARCHITECTURE.into(),
            codec_id: self.codec_id.clone(),
            latent_shape: self.latent_shape,
            tau: self.cfg.tau,
            instructions: self.instructions.clone(),
            train_config_hash,
            editor: self.cfg.clone(),
            schedule: self.schedule.clone(),
            params_sha256: self.params.checksum(),
            epoch,
        }
    }

    /// Writes `params.safetensors` and `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path, train_config_hash: Option<String>, epoch: Option<usize>) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let tensors: BTreeMap<_, _> = self.params.iter().map(|(k, v)| (k.clone(), v.clone().into_dyn())).collect();
        write_tensors(&dir.join(PARAMS), &tensors)?;
        let manifest = serde_json::to_string_pretty(&self.manifest(train_config_hash, epoch))?;
        write_atomic(&dir.join(MANIFEST), manifest.as_bytes())
    }

    /// Loads from a checkpoint directory or its manifest path.
    pub fn load(path: &Path) -> Result<(Self, CheckpointManifest)> {
        let dir: PathBuf = if path.is_dir() {
            path.to_path_buf()
        } else {
            path.parent().map(Path::to_path_buf).unwrap_or_default()
        };
        let manifest = CheckpointManifest::parse(&std::fs::read_to_string(dir.join(MANIFEST))?)?;
        let mut tensors = read_tensors(&dir.join(PARAMS))?;
        let mut params = ParamSet::new();
        let names: Vec<String> = tensors.keys().cloned().collect();
        for name in names {
            let arr = take_2d(&mut tensors, &name)?;
            params.insert(name, arr);
        }
        if params.checksum() != manifest.params_sha256 {
            return Err(Error::Format("parameter checksum does not match the manifest".into()));
        }
        let editor = Self::from_parts(&manifest, params)?;
        Ok((editor, manifest))
    }

    fn from_parts(m: &CheckpointManifest, params: ParamSet) -> Result<Self> {
        check_instructions(&m.instructions)?;
        let (rows, c) = m.latent_shape;
        let d = params.get("in_proj")?.nrows();
        let h = params.get("w1")?.nrows();
        let ok = params.get("in_proj")?.dim() == (d, 2 * c)
            && params.get("w1")?.dim() == (h, d)
            && params.get("b1")?.dim() == (1, h)
            && params.get("w2")?.dim() == (d, h)
            && params.get("out_proj")?.dim() == (c, d)
            && params.get("out_bias")?.dim() == (1, c)
            && params.len() == 6 + m.instructions.len()
            && (0..m.instructions.len()).all(|i| params.get(&embed_name(i)).map(|e| e.dim() == (rows, d)).unwrap_or(false));
        if !ok {
            return Err(Error::Format("checkpoint parameters do not match the manifest shapes".into()));
        }
        Ok(Self {
            cfg: m.editor.clone(),
            schedule: m.schedule.clone(),
            codec_id: m.codec_id.clone(),
            latent_shape: m.latent_shape,
            instructions: m.instructions.clone(),
            params,
            forward_calls: AtomicUsize::new(0),
        })
    }
}

impl LatentEditor for ToyEditor {
    fn architecture(&self) -> &str {
        ARCHITECTURE
    }

    fn codec_id(&self) -> &str {
        &self.codec_id
    }

    fn latent_shape(&self) -> (usize, usize) {
        self.latent_shape
    }

    fn instructions(&self) -> &[EditInstruction] {
        &self.instructions
    }

    fn edit(&self, r_src: &Latent, instruction: &str) -> Result<Latent> {
        self.edit_with_eps(r_src, instruction, &self.inference_noise())
    }

    fn forward_count(&self) -> usize {
        self.forward_calls.load(Ordering::SeqCst)
    }

    fn weights_hash(&self) -> String {
        self.params.checksum()
    }
}
