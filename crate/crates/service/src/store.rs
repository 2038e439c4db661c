//! Persistence: session records in an embedded redb database, latents as
//! content-addressed container files next to it.

use std::path::{Path, PathBuf};

use latedit_core::container::{latent_from_parts, latent_to_parts, sidecar_path, write_atomic};
use latedit_core::Latent;
use redb::{Database, ReadableDatabase, ReadableTable, TableDefinition};
use sha2::{Digest, Sha256};

use crate::error::{Result, ServiceError};
use crate::session::EditSession;

const SESSIONS: TableDefinition<&str, &[u8]> = TableDefinition::new("sessions");
const DB_FILE: &str = "sessions.redb";
const LATENT_DIR: &str = "latents";

pub struct SessionStore {
    db: Database,
    latent_dir: PathBuf,
}

impl std::fmt::Debug for SessionStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SessionStore").field("latent_dir", &self.latent_dir).finish()
    }
}

/// Content hash identifying a latent: sha256 over its container bytes and sidecar.
pub fn latent_hash(latent: &Latent) -> Result<String> {
    let (bytes, sidecar) = latent_to_parts(latent)?;
    Ok(hash_parts(&bytes, &sidecar))
}

fn hash_parts(bytes: &[u8], sidecar: &str) -> String {
    let mut h = Sha256::new();
    h.update((bytes.len() as u64).to_le_bytes());
    h.update(bytes);
    h.update(sidecar.as_bytes());
    hex::encode(h.finalize())
}

fn is_hash(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| b.is_ascii_hexdigit())
}

impl SessionStore {
    /// Opens (or creates) a store rooted at `root`.
    pub fn open(root: &Path) -> Result<Self> {
        let latent_dir = root.join(LATENT_DIR);
        std::fs::create_dir_all(&latent_dir).map_err(ServiceError::storage)?;
        let db = Database::create(root.join(DB_FILE)).map_err(ServiceError::storage)?;
        let tx = db.begin_write().map_err(ServiceError::storage)?;
        tx.open_table(SESSIONS).map_err(ServiceError::storage)?;
        tx.commit().map_err(ServiceError::storage)?;
        Ok(Self { db, latent_dir })
    }

    pub fn put_session(&self, session: &EditSession) -> Result<()> {
        let json = serde_json::to_vec(session).map_err(ServiceError::storage)?;
        let tx = self.db.begin_write().map_err(ServiceError::storage)?;
        {
            let mut table = tx.open_table(SESSIONS).map_err(ServiceError::storage)?;
            table
                .insert(session.id.as_str(), json.as_slice())
                .map_err(ServiceError::storage)?;
        }
        tx.commit().map_err(ServiceError::storage)
    }

    pub fn get_session(&self, id: &str) -> Result<Option<EditSession>> {
        let tx = self.db.begin_read().map_err(ServiceError::storage)?;
        let table = tx.open_table(SESSIONS).map_err(ServiceError::storage)?;
        match table.get(id).map_err(ServiceError::storage)? {
            Some(v) => Ok(Some(serde_json::from_slice(v.value()).map_err(ServiceError::storage)?)),
            None => Ok(None),
        }
    }

    pub fn session_ids(&self) -> Result<Vec<String>> {
        let tx = self.db.begin_read().map_err(ServiceError::storage)?;
        let table = tx.open_table(SESSIONS).map_err(ServiceError::storage)?;
        table
            .iter()
            .map_err(ServiceError::storage)?
            .map(|r| r.map(|(k, _)| k.value().to_string()).map_err(ServiceError::storage))
            .collect()
    }

    fn latent_path(&self, hash: &str) -> PathBuf {
        self.latent_dir.join(format!("{hash}.safetensors"))
    }

    /// Writes a latent unless an identical one is already stored; returns its hash.
    pub fn put_latent(&self, latent: &Latent) -> Result<String> {
        let (bytes, sidecar) = latent_to_parts(latent)?;
        let hash = hash_parts(&bytes, &sidecar);
        let path = self.latent_path(&hash);
        if !path.exists() {
            // The sidecar goes first so a present data file implies a complete pair.
            write_atomic(&sidecar_path(&path), sidecar.as_bytes())?;
            write_atomic(&path, &bytes)?;
        }
        Ok(hash)
    }

    pub fn get_latent(&self, hash: &str) -> Result<Latent> {
        if !is_hash(hash) {
            return Err(ServiceError::Storage(format!("malformed latent reference {hash:?}")));
        }
        let path = self.latent_path(hash);
        let bytes = std::fs::read(&path).map_err(|e| ServiceError::Storage(format!("latent {hash}: {e}")))?;
        let sidecar = std::fs::read_to_string(sidecar_path(&path))
            .map_err(|e| ServiceError::Storage(format!("latent {hash} sidecar: {e}")))?;
        if hash_parts(&bytes, &sidecar) != hash {
            return Err(ServiceError::Storage(format!("latent {hash} is corrupt")));
        }
        Ok(latent_from_parts(&bytes, &sidecar)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn latents_are_content_addressed() {
        let dir = tempfile::tempdir().unwrap();
        let store = SessionStore::open(dir.path()).unwrap();
        let a = Latent::new(array![[1.0, 2.0], [3.0, 4.0]], "c").unwrap();
        let h1 = store.put_latent(&a).unwrap();
        let h2 = store.put_latent(&a.clone()).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(h1, latent_hash(&a).unwrap());
        assert_eq!(store.get_latent(&h1).unwrap(), a);
        let b = Latent::new(array![[1.0, 2.0], [3.0, 4.0]], "other").unwrap();
        assert_ne!(store.put_latent(&b).unwrap(), h1);
        assert!(store.get_latent("../etc/passwd").is_err());
        assert!(store.get_latent(&"0".repeat(64)).is_err());
    }

    #[test]
    fn corrupt_latent_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let store = SessionStore::open(dir.path()).unwrap();
        let h = store.put_latent(&Latent::zeros((2, 2), "c")).unwrap();
        let p = store.latent_path(&h);
        let mut bytes = std::fs::read(&p).unwrap();
        let n = bytes.len();
        bytes[n - 1] ^= 0x40;
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(store.get_latent(&h), Err(ServiceError::Storage(m)) if m.contains("corrupt")));
    }

    #[test]
    fn sessions_survive_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let s = EditSession {
            id: "abc".into(),
            codec_id: "c".into(),
            base: "0".repeat(64),
            stack: vec![],
            created_ms: 1,
            updated_ms: 2,
        };
        {
            let store = SessionStore::open(dir.path()).unwrap();
            store.put_session(&s).unwrap();
        }
        let store = SessionStore::open(dir.path()).unwrap();
        assert_eq!(store.get_session("abc").unwrap(), Some(s));
        assert_eq!(store.get_session("nope").unwrap(), None);
        assert_eq!(store.session_ids().unwrap(), vec!["abc".to_string()]);
    }
}
