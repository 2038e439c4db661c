#![allow(dead_code)]

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use latedit_core::codec::{ToyCodec, ToyCodecConfig};
use latedit_core::editor::EditorConfig;
use latedit_core::{Codec, EditInstruction, Latent, LatentEditor, NoiseSchedule, ToyEditor};
use latedit_service::{Service, SessionStore, ToyTextSampler, TurntableSettings};
use ndarray::Array2;

pub const RED: &str = "make it red";
pub const BLUE: &str = "make it blue";

pub fn codec() -> Arc<ToyCodec> {
    Arc::new(ToyCodec::new(ToyCodecConfig::default()).unwrap())
}

/// An untrained editor with random weights: deterministic and far from identity.
pub fn random_editor(codec: &ToyCodec) -> Arc<ToyEditor> {
    let cfg = EditorConfig {
        init: latedit_core::editor::EditorInit::Random,
        ..EditorConfig::default()
    };
    let instructions = vec![EditInstruction::global(RED).unwrap(), EditInstruction::global(BLUE).unwrap()];
    Arc::new(
        ToyEditor::init(cfg, NoiseSchedule::shap_e_compatible(), codec.id(), codec.latent_shape(), instructions)
            .unwrap(),
    )
}

/// Oracle editor that adds a fixed residual `c`.
pub struct ShiftEditor {
    pub c: Array2<f64>,
    codec_id: String,
    instructions: Vec<EditInstruction>,
    calls: AtomicUsize,
}

impl ShiftEditor {
    pub fn new(codec: &ToyCodec) -> Self {
        let shape = codec.latent_shape();
        let c = Array2::from_shape_fn(shape, |(i, j)| ((i * 7 + j * 3) % 5) as f64 * 0.25 - 0.5);
        Self {
            c,
            codec_id: codec.id().to_string(),
            instructions: vec![EditInstruction::global(RED).unwrap()],
            calls: AtomicUsize::new(0),
        }
    }
}

impl LatentEditor for ShiftEditor {
    fn architecture(&self) -> &str {
        "shift-oracle"
    }
    fn codec_id(&self) -> &str {
        &self.codec_id
    }
    fn latent_shape(&self) -> (usize, usize) {
        self.c.dim()
    }
    fn instructions(&self) -> &[EditInstruction] {
        &self.instructions
    }
    fn edit(&self, r: &Latent, _instruction: &str) -> latedit_core::Result<Latent> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        r.with_data(r.data() + &self.c)
    }
    fn forward_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
    fn weights_hash(&self) -> String {
        "shift".into()
    }
}

/// Small turntables keep the tests fast.
pub const SMALL: TurntableSettings = TurntableSettings {
    frames: 2,
    resolution: 8,
};

pub fn service(dir: &Path, editor: Arc<dyn LatentEditor>, codec: Arc<ToyCodec>) -> Service {
    let store = SessionStore::open(dir).unwrap();
    Service::new(editor, codec.clone(), store)
        .unwrap()
        .with_sampler(Arc::new(ToyTextSampler::new(codec)))
        .with_turntable(SMALL)
}

pub fn source_latent(codec: &ToyCodec, seed: u64) -> Latent {
    let mut rng = latedit_core::rng::seeded(seed);
    let data = {
        let (r, c) = codec.latent_shape();
        latedit_core::rng::gaussian2(&mut rng, r, c) * 0.5
    };
    Latent::new(data, codec.id()).unwrap()
}
