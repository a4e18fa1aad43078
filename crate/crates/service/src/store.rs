//! Models, actuation tables, plants and ratings, optionally persisted as flat
//! JSON files in a workspace directory.
//!
//! Layout: `models/{id}.json` (model), `models/{id}.rev` (revision),
//! `actuation/{id}.json`, `plants/{id}.json`, `ratings.json`.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use fdvv_core::actuation::ActuationTable;
use fdvv_core::model::FdvvModel;
use fdvv_core::plant::VirtualPlant;
use fdvv_core::vibration::RatingStore;
use serde::Serialize;

/// Environment variable naming the workspace directory.
pub const WORKSPACE_ENV: &str = "FDVV_WORKSPACE";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Entry {
    pub revision: u64,
    pub model: FdvvModel,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub actuation: Option<ActuationTable>,
}

/// Plants every store knows without a file.
pub fn builtin_plant(id: &str) -> Option<VirtualPlant> {
    match id {
        "default" => Some(VirtualPlant::default()),
        "identity" => Some(VirtualPlant::identity()),
        _ => None,
    }
}

#[derive(Debug, Default)]
pub struct ModelStore {
    entries: BTreeMap<String, Entry>,
    plants: BTreeMap<String, VirtualPlant>,
    pub ratings: RatingStore,
    workspace: Option<PathBuf>,
}

fn is_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        && !id.starts_with('.')
}

fn json_files(dir: &Path) -> io::Result<Vec<(String, PathBuf)>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for e in fs::read_dir(dir)? {
        let path = e?.path();
        if path.extension().is_some_and(|x| x == "json") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), path.clone()));
            }
        }
    }
    out.sort();
    Ok(out)
}

impl ModelStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Loads every model, table, plant and rating under `dir`, creating the
    /// directory when missing. Unreadable files are skipped with a warning.
    pub fn open(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        for sub in ["models", "actuation", "plants"] {
            fs::create_dir_all(dir.join(sub))?;
        }
        let mut store = Self {
            workspace: Some(dir.clone()),
            ..Self::default()
        };
        for (id, path) in json_files(&dir.join("models"))? {
            let model = match fs::read_to_string(&path).map(|t| FdvvModel::from_json(&t)) {
                Ok(Ok(m)) => m,
                Ok(Err(e)) => {
                    log::warn!("skipping {}: {e}", path.display());
                    continue;
                }
                Err(e) => {
                    log::warn!("skipping {}: {e}", path.display());
                    continue;
                }
            };
            let revision = fs::read_to_string(dir.join("models").join(format!("{id}.rev")))
                .ok()
                .and_then(|s| s.trim().parse().ok())
                .unwrap_or(1);
            let actuation = fs::read_to_string(dir.join("actuation").join(format!("{id}.json")))
                .ok()
                .and_then(|t| serde_json::from_str::<ActuationTable>(&t).ok())
                .filter(|t| t.validate().is_ok());
            store.entries.insert(
                id,
                Entry {
                    revision,
                    model,
                    actuation,
                },
            );
        }
        for (id, path) in json_files(&dir.join("plants"))? {
            match fs::read_to_string(&path)
                .ok()
                .and_then(|t| serde_json::from_str::<VirtualPlant>(&t).ok())
            {
                Some(p) if p.validate().is_ok() => {
                    store.plants.insert(id, p);
                }
                _ => log::warn!("skipping plant {}", path.display()),
            }
        }
        if let Ok(t) = fs::read_to_string(dir.join("ratings.json")) {
            store.ratings = serde_json::from_str(&t).unwrap_or_default();
        }
        Ok(store)
    }

    pub fn ids(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn get(&self, id: &str) -> Option<&Entry> {
        self.entries.get(id)
    }

    pub fn plant(&self, id: &str) -> Option<VirtualPlant> {
        builtin_plant(id).or_else(|| self.plants.get(id).cloned())
    }

    /// Adds a model under a new id at revision 1.
    pub fn insert(&mut self, id: &str, model: FdvvModel) -> io::Result<Option<u64>> {
        if !is_id(id) || self.entries.contains_key(id) {
            return Ok(None);
        }
        let entry = Entry {
            revision: 1,
            model,
            actuation: None,
        };
        self.persist(id, &entry)?;
        self.entries.insert(id.to_string(), entry);
        Ok(Some(1))
    }

    /// Replaces the model, drops the now stale actuation and bumps the revision.
    pub fn replace_model(&mut self, id: &str, model: FdvvModel) -> io::Result<u64> {
        let entry = self.entries.get_mut(id).expect("caller checked the id");
        entry.model = model;
        entry.actuation = None;
        entry.revision += 1;
        let snapshot = entry.clone();
        self.persist(id, &snapshot)?;
        if let Some(dir) = &self.workspace {
            let _ = fs::remove_file(dir.join("actuation").join(format!("{id}.json")));
        }
        Ok(snapshot.revision)
    }

    pub fn set_actuation(&mut self, id: &str, table: ActuationTable) -> io::Result<u64> {
        let entry = self.entries.get_mut(id).expect("caller checked the id");
        entry.actuation = Some(table);
        entry.revision += 1;
        let snapshot = entry.clone();
        self.persist(id, &snapshot)?;
        Ok(snapshot.revision)
    }

    pub fn save_ratings(&self) -> io::Result<()> {
        match &self.workspace {
            Some(dir) => write_atomic(&dir.join("ratings.json"), &to_pretty(&self.ratings)),
            None => Ok(()),
        }
    }

    fn persist(&self, id: &str, entry: &Entry) -> io::Result<()> {
        let Some(dir) = &self.workspace else {
            return Ok(());
        };
        write_atomic(&dir.join("models").join(format!("{id}.json")), &entry.model.to_json())?;
        write_atomic(&dir.join("models").join(format!("{id}.rev")), &entry.revision.to_string())?;
        if let Some(t) = &entry.actuation {
            write_atomic(&dir.join("actuation").join(format!("{id}.json")), &to_pretty(t))?;
        }
        Ok(())
    }
}

fn to_pretty<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("store values serialize")
}

fn write_atomic(path: &Path, text: &str) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text)?;
    fs::rename(tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use fdvv_core::model::VelocityCurve;
    use fdvv_core::bspline::BSplineCurve;

    fn model(id: &str) -> FdvvModel {
        FdvvModel {
            button_id: id.into(),
            travel_range_mm: 4.0,
            activation_point_mm: 2.0,
            press_curves: vec![VelocityCurve {
                velocity_mm_s: 100.0,
                curve: BSplineCurve::with_forces(3, 0.0, 4.0, &[40.0; 15]).unwrap(),
            }],
            release_curves: None,
            vibration: None,
        }
    }

    #[test]
    fn workspace_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ModelStore::open(dir.path()).unwrap();
        assert_eq!(s.insert("a", model("a")).unwrap(), Some(1));
        assert_eq!(s.insert("a", model("a")).unwrap(), None);
        let mut m = model("a");
        m.activation_point_mm = 1.5;
        assert_eq!(s.replace_model("a", m.clone()).unwrap(), 2);
        s.ratings.rate("a", 100.0, "t", 5).unwrap();
        s.save_ratings().unwrap();

        let back = ModelStore::open(dir.path()).unwrap();
        let e = back.get("a").unwrap();
        assert_eq!((e.revision, &e.model), (2, &m));
        assert_eq!(back.ratings.ratings.len(), 1);
    }

    #[test]
    fn ids_are_plain_file_names() {
        let mut s = ModelStore::in_memory();
        assert_eq!(s.insert("../x", model("x")).unwrap(), None);
        assert_eq!(s.insert(".hidden", model("x")).unwrap(), None);
        assert_eq!(s.insert("mx-clear_1", model("x")).unwrap(), Some(1));
    }

    #[test]
    fn builtin_plants_resolve() {
        let s = ModelStore::in_memory();
        assert_eq!(s.plant("identity"), Some(VirtualPlant::identity()));
        assert!(s.plant("nope").is_none());
    }
}
