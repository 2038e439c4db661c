//! Edit sessions: a base latent plus a stack of strength-weighted edits.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use latedit_core::codec::uniform_viewpoints;
use latedit_core::config::CameraConfig;
use latedit_core::export::rgb_png;
use latedit_core::geometry::{parse_geometry, GeometryFormat};
use latedit_core::{scale_edit, AssetSource, Codec, EditInstruction, Latent, LatentEditor};
use ndarray::{s, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};
use crate::sampler::TextSampler;
use crate::store::SessionStore;

/// Largest turntable request accepted.
pub const MAX_FRAMES: usize = 72;
pub const MAX_RESOLUTION: usize = 1024;
const RENDER_CACHE_CAP: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackEntry {
    pub instruction: String,
    pub eta: f64,
    /// Editor output for this entry's input, kept so strength changes need no forward pass.
    pub output: String,
    /// Latent after this entry.
    pub latent: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditSession {
    pub id: String,
    pub codec_id: String,
    pub base: String,
    pub stack: Vec<StackEntry>,
    pub created_ms: u64,
    pub updated_ms: u64,
}

impl EditSession {
    /// Reference to the latest latent.
    pub fn head(&self) -> &str {
        self.stack.last().map_or(&self.base, |e| &e.latent)
    }

    /// Reference to the latent after `stage` entries (0 is the base).
    pub fn stage(&self, stage: usize) -> Result<&str> {
        match stage {
            0 => Ok(&self.base),
            k if k <= self.stack.len() => Ok(&self.stack[k - 1].latent),
            _ => Err(ServiceError::EntryOutOfRange {
                index: stage,
                len: self.stack.len(),
            }),
        }
    }
}

/// Where a session's base latent comes from.
#[derive(Debug, Clone)]
pub enum SessionSource {
    Latent(Latent),
    Asset {
        format: Option<GeometryFormat>,
        bytes: Vec<u8>,
        class_label: String,
    },
    Text(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurntableSettings {
    pub frames: usize,
    pub resolution: usize,
}

impl Default for TurntableSettings {
    fn default() -> Self {
        Self {
            frames: 12,
            resolution: 256,
        }
    }
}

impl TurntableSettings {
    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_FRAMES).contains(&self.frames) {
            return Err(ServiceError::Validation(format!("frames must be in 1..={MAX_FRAMES}")));
        }
        if !(1..=MAX_RESOLUTION).contains(&self.resolution) {
            return Err(ServiceError::Validation(format!("resolution must be in 1..={MAX_RESOLUTION}")));
        }
        Ok(())
    }
}

/// Frames rendered side by side in one PNG.
#[derive(Debug, Clone, PartialEq)]
pub struct Turntable {
    pub png: Arc<Vec<u8>>,
    pub frames: usize,
    pub resolution: usize,
}

type RenderKey = (String, usize, usize);

/// The editing service. Weights are shared read-only; each session's
/// mutations are serialized through a per-session lock.
pub struct Service {
    editor: Arc<dyn LatentEditor>,
    codec: Arc<dyn Codec>,
    store: SessionStore,
    sampler: Option<Arc<dyn TextSampler>>,
    camera: CameraConfig,
    turntable: TurntableSettings,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    renders: Mutex<HashMap<RenderKey, Arc<Vec<u8>>>>,
}

impl std::fmt::Debug for Service {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Service")
            .field("editor", &self.editor.architecture())
            .field("codec", &self.codec.id())
            .field("store", &self.store)
            .finish()
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

fn check_eta(eta: f64) -> Result<()> {
    if eta.is_finite() {
        Ok(())
    } else {
        Err(ServiceError::Validation(format!("eta must be finite (got {eta})")))
    }
}

impl Service {
    pub fn new(editor: Arc<dyn LatentEditor>, codec: Arc<dyn Codec>, store: SessionStore) -> Result<Self> {
        if editor.codec_id() != codec.id() {
            return Err(ServiceError::Validation(format!(
                "editor was trained for codec {:?} but {:?} is loaded",
                editor.codec_id(),
                codec.id()
            )));
        }
        if editor.latent_shape() != codec.latent_shape() {
            return Err(ServiceError::Validation(format!(
                "editor latent shape {:?} differs from codec shape {:?}",
                editor.latent_shape(),
                codec.latent_shape()
            )));
        }
        Ok(Self {
            editor,
            codec,
            store,
            sampler: None,
            camera: CameraConfig::default(),
            turntable: TurntableSettings::default(),
            locks: Mutex::new(HashMap::new()),
            renders: Mutex::new(HashMap::new()),
        })
    }

    pub fn with_sampler(mut self, sampler: Arc<dyn TextSampler>) -> Self {
        self.sampler = Some(sampler);
        self
    }

    pub fn with_camera(mut self, camera: CameraConfig) -> Self {
        self.camera = camera;
        self
    }

    pub fn with_turntable(mut self, settings: TurntableSettings) -> Self {
        self.turntable = settings;
        self
    }

    pub fn editor(&self) -> &dyn LatentEditor {
        self.editor.as_ref()
    }

    pub fn codec(&self) -> &dyn Codec {
        self.codec.as_ref()
    }

    pub fn store(&self) -> &SessionStore {
        &self.store
    }

    pub fn turntable_defaults(&self) -> TurntableSettings {
        self.turntable
    }

    pub fn instructions(&self) -> Result<&[EditInstruction]> {
        let list = self.editor.instructions();
        if list.is_empty() {
            return Err(ServiceError::Validation("loaded checkpoint has no instructions".into()));
        }
        Ok(list)
    }

    fn session_lock(&self, id: &str) -> Arc<Mutex<()>> {
        let mut locks = self.locks.lock().unwrap_or_else(|p| p.into_inner());
        locks.entry(id.to_string()).or_default().clone()
    }

    fn with_session<T>(&self, id: &str, f: impl FnOnce(&mut EditSession) -> Result<T>) -> Result<T> {
        let lock = self.session_lock(id);
        let _guard = lock.lock().unwrap_or_else(|p| p.into_inner());
        let mut session = self.get_session(id)?;
        session.updated_ms = now_ms().max(session.updated_ms);
        let out = f(&mut session)?;
        self.store.put_session(&session)?;
        Ok(out)
    }

    pub fn get_session(&self, id: &str) -> Result<EditSession> {
        self.store
            .get_session(id)?
            .ok_or_else(|| ServiceError::SessionNotFound(id.to_string()))
    }

    pub fn latent(&self, reference: &str) -> Result<Latent> {
        self.store.get_latent(reference)
    }

    pub fn head(&self, id: &str) -> Result<Latent> {
        let s = self.get_session(id)?;
        self.latent(s.head())
    }

    fn base_latent(&self, source: SessionSource) -> Result<Latent> {
        let latent = match source {
            SessionSource::Latent(l) => l,
            SessionSource::Asset {
                format,
                bytes,
                class_label,
            } => {
                if bytes.is_empty() {
                    return Err(ServiceError::Validation("asset upload is empty".into()));
                }
                let format = format.unwrap_or_else(|| GeometryFormat::sniff(&bytes));
                let points = parse_geometry(&bytes, format)?;
                self.codec.encode(&AssetSource::from_points(points, class_label, "upload"))?
            }
            SessionSource::Text(prompt) => {
                if prompt.trim().is_empty() {
                    return Err(ServiceError::Validation("text prompt is empty".into()));
                }
                let sampler = self
                    .sampler
                    .as_ref()
                    .ok_or_else(|| ServiceError::Unsupported("no text-to-latent sampler is loaded".into()))?;
                sampler.sample(&prompt)?
            }
        };
        if latent.codec_id() != self.codec.id() {
            return Err(ServiceError::Validation(format!(
                "latent belongs to codec {:?}, service runs {:?}",
                latent.codec_id(),
                self.codec.id()
            )));
        }
        latent.check_shape(self.codec.latent_shape())?;
        Ok(latent)
    }

    pub fn create_session(&self, source: SessionSource) -> Result<EditSession> {
        let base = self.base_latent(source)?;
        let now = now_ms();
        let session = EditSession {
            id: uuid::Uuid::new_v4().to_string(),
            codec_id: self.codec.id().to_string(),
            base: self.store.put_latent(&base)?,
            stack: Vec::new(),
            created_ms: now,
            updated_ms: now,
        };
        self.store.put_session(&session)?;
        self.render_cached(&session.base, &base, self.turntable)?;
        tracing::info!(session = %session.id, "session created");
        Ok(session)
    }

    fn check_instruction(&self, instruction: &str) -> Result<()> {
        if self.editor.instruction(instruction).is_some() {
            return Ok(());
        }
        Err(ServiceError::UnknownInstruction {
            given: instruction.to_string(),
            available: self.editor.instructions().iter().map(|i| i.text().to_string()).collect(),
        })
    }

    /// Pushes `scale_edit(head, g(head, y), eta)`; one editor forward pass.
    pub fn apply_edit(&self, id: &str, instruction: &str, eta: f64) -> Result<EditSession> {
        check_eta(eta)?;
        self.check_instruction(instruction)?;
        let session = self.with_session(id, |s| {
            let head = self.latent(s.head())?;
            let output = self.editor.edit(&head, instruction)?;
            let next = scale_edit(&head, &output, eta)?;
            s.stack.push(StackEntry {
                instruction: instruction.to_string(),
                eta,
                output: self.store.put_latent(&output)?,
                latent: self.store.put_latent(&next)?,
            });
            Ok(s.clone())
        })?;
        let head = self.latent(session.head())?;
        self.render_cached(session.head(), &head, self.turntable)?;
        Ok(session)
    }

    /// Re-weights entry `index` from its cached editor output. Later entries
    /// see a new input, so each of them is re-run through the editor.
    pub fn set_strength(&self, id: &str, index: usize, eta: f64) -> Result<EditSession> {
        check_eta(eta)?;
        let session = self.with_session(id, |s| {
            let len = s.stack.len();
            if index >= len {
                return Err(ServiceError::EntryOutOfRange { index, len });
            }
            let mut prev = self.latent(s.stage(index)?)?;
            for k in index..len {
                let entry = &mut s.stack[k];
                let output = if k == index {
                    entry.eta = eta;
                    self.latent(&entry.output)?
                } else {
                    let out = self.editor.edit(&prev, &entry.instruction)?;
                    entry.output = self.store.put_latent(&out)?;
                    out
                };
                let next = scale_edit(&prev, &output, entry.eta)?;
                let reference = self.store.put_latent(&next)?;
                let unchanged = reference == entry.latent;
                entry.latent = reference;
                if unchanged {
                    // Identical latent: everything downstream is already consistent.
                    break;
                }
                prev = next;
            }
            Ok(s.clone())
        })?;
        let head = self.latent(session.head())?;
        self.render_cached(session.head(), &head, self.turntable)?;
        Ok(session)
    }

    /// Recomputes the head from the base by running every stack entry again.
    pub fn replay(&self, id: &str) -> Result<Latent> {
        let s = self.get_session(id)?;
        let mut r = self.latent(&s.base)?;
        for entry in &s.stack {
            let out = self.editor.edit(&r, &entry.instruction)?;
            r = scale_edit(&r, &out, entry.eta)?;
        }
        Ok(r)
    }

    /// Turntable of the latent after `stage` entries (the head when `None`).
    pub fn turntable(&self, id: &str, stage: Option<usize>, settings: TurntableSettings) -> Result<Turntable> {
        settings.validate()?;
        let s = self.get_session(id)?;
        let reference = match stage {
            Some(k) => s.stage(k)?.to_string(),
            None => s.head().to_string(),
        };
        let latent = self.latent(&reference)?;
        let png = self.render_cached(&reference, &latent, settings)?;
        Ok(Turntable {
            png,
            frames: settings.frames,
            resolution: settings.resolution,
        })
    }

    fn render_cached(&self, reference: &str, latent: &Latent, settings: TurntableSettings) -> Result<Arc<Vec<u8>>> {
        let key = (reference.to_string(), settings.frames, settings.resolution);
        if let Some(hit) = self.renders.lock().unwrap_or_else(|p| p.into_inner()).get(&key) {
            return Ok(hit.clone());
        }
        let png = Arc::new(self.render_strip(latent, settings)?);
        let mut cache = self.renders.lock().unwrap_or_else(|p| p.into_inner());
        if cache.len() >= RENDER_CACHE_CAP {
            cache.clear();
        }
        cache.insert(key, png.clone());
        Ok(png)
    }

    fn render_strip(&self, latent: &Latent, settings: TurntableSettings) -> Result<Vec<u8>> {
        let res = settings.resolution;
        let field = self.codec.decode(latent)?;
        let mut strip = Array3::zeros((res, res * settings.frames, 3));
        for (i, v) in uniform_viewpoints(&self.camera, settings.frames).iter().enumerate() {
            let view = self.codec.render(&field, v, res)?;
            strip.slice_mut(s![.., i * res..(i + 1) * res, ..]).assign(&view.rgb);
        }
        Ok(rgb_png(&strip)?)
    }
}
