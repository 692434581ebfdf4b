use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::format::{load_cloud, load_field, save_cloud, save_field};
use crate::error::{Error, Result};
use crate::synth::{Landmarks, RegistrationCase};

/// File names of one case, relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseEntry {
    pub id: String,
    pub fixed: PathBuf,
    pub moving: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moving_highres: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmarks_moving: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmarks_fixed: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    /// Directory the entries are relative to; taken from the manifest location.
    #[serde(skip)]
    pub root: PathBuf,
    pub units: String,
    pub cases: Vec<CaseEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Units, id uniqueness, landmark pairing and file existence.
    pub fn validate(&self) -> Result<()> {
        if self.units != "mm" {
            return Err(Error::Config(format!("manifest units must be \"mm\", got {:?}", self.units)));
        }
        let mut seen = HashSet::new();
        for c in &self.cases {
            if !seen.insert(c.id.as_str()) {
                return Err(Error::Config(format!("duplicate case id {:?}", c.id)));
            }
            if c.landmarks_moving.is_some() != c.landmarks_fixed.is_some() {
                return Err(Error::Config(format!("case {:?}: landmarks need both moving and fixed files", c.id)));
            }
            let files = [Some(&c.fixed), Some(&c.moving), c.moving_highres.as_ref(), c.landmarks_moving.as_ref(), c.landmarks_fixed.as_ref(), c.gt.as_ref()];
            for f in files.into_iter().flatten() {
                let p = self.root.join(f);
                if !p.is_file() {
                    return Err(Error::Config(format!("case {:?}: missing file {}", c.id, p.display())));
                }
            }
        }
        Ok(())
    }

    /// Parse every referenced file.
    pub fn load_cases(&self) -> Result<Vec<RegistrationCase>> {
        self.cases.iter().map(|c| self.load_case(c)).collect()
    }

    fn load_case(&self, c: &CaseEntry) -> Result<RegistrationCase> {
        let at = |p: &PathBuf| self.root.join(p);
        let mut case = RegistrationCase::new(c.id.clone(), load_cloud(&at(&c.fixed))?, load_cloud(&at(&c.moving))?);
        case.moving_highres = c.moving_highres.as_ref().map(|p| load_cloud(&at(p))).transpose()?;
        case.gt = c.gt.as_ref().map(|p| load_field(&at(p))).transpose()?;
        if let (Some(m), Some(f)) = (&c.landmarks_moving, &c.landmarks_fixed) {
            case.landmarks = Some(Landmarks::new(load_cloud(&at(m))?, load_cloud(&at(f))?)?);
        }
        case.validate()?;
        Ok(case)
    }
}

/// Write `cases` under `dir` (one sub-directory per case) plus `manifest.json`.
pub fn write_dataset(dir: &Path, cases: &[RegistrationCase]) -> Result<DatasetManifest> {
    let mut entries = Vec::with_capacity(cases.len());
    for case in cases {
        let rel = |name: &str| PathBuf::from(&case.id).join(name);
        save_cloud(&dir.join(rel("fixed.xyz")), &case.fixed)?;
        save_cloud(&dir.join(rel("moving.xyz")), &case.moving)?;
        let mut e = CaseEntry {
            id: case.id.clone(),
            fixed: rel("fixed.xyz"),
            moving: rel("moving.xyz"),
            moving_highres: None,
            landmarks_moving: None,
            landmarks_fixed: None,
            gt: None,
        };
        if let Some(h) = &case.moving_highres {
            save_cloud(&dir.join(rel("moving_highres.xyz")), h)?;
            e.moving_highres = Some(rel("moving_highres.xyz"));
        }
        if let Some(g) = &case.gt {
            save_field(&dir.join(rel("gt.xyz")), g)?;
            e.gt = Some(rel("gt.xyz"));
        }
        if let Some(l) = &case.landmarks {
            save_cloud(&dir.join(rel("landmarks_moving.xyz")), &l.moving)?;
            save_cloud(&dir.join(rel("landmarks_fixed.xyz")), &l.fixed)?;
            e.landmarks_moving = Some(rel("landmarks_moving.xyz"));
            e.landmarks_fixed = Some(rel("landmarks_fixed.xyz"));
        }
        entries.push(e);
    }
    let m = DatasetManifest {
        root: dir.to_path_buf(),
        units: "mm".into(),
        cases: entries,
    };
    m.save(&dir.join(MANIFEST_FILE))?;
    Ok(m)
}
