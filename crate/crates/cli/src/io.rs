//! Input readers and the output directory writer.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use wfr::characteristics::FieldGrid;
use wfr::cone_space::WeightedCurve;
use wfr::field_io::{read_field_grid, write_field_grid, Encoding};
use wfr::superposition::CurveEnsemble;

use crate::error::CliError;

fn input_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Input {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| input_err(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = read_text(path)?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| input_err(path, format!("at `{}`: {}", e.path(), e.inner())))
}

/// `.csv` files use the `t,h,x1..xd` layout; anything else is JSON.
pub fn read_curve(path: &Path) -> Result<WeightedCurve, CliError> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        WeightedCurve::from_csv(&read_text(path)?).map_err(|e| input_err(path, e))
    } else {
        read_json(path)
    }
}

pub fn read_field(path: &Path) -> Result<FieldGrid, CliError> {
    read_field_grid(path).map_err(|e| input_err(path, e))
}

/// One row per node of every atom: `atom,coefficient,t,h,x1..xd`.
pub fn trajectories_csv(e: &CurveEnsemble) -> String {
    let d = e.atoms().first().map_or(0, |a| a.curve.dim());
    let mut s = String::from("atom,coefficient,t,h");
    for j in 1..=d {
        let _ = write!(s, ",x{j}");
    }
    s.push('\n');
    for (i, a) in e.atoms().iter().enumerate() {
        let c = &a.curve;
        for k in 0..c.len() {
            let _ = write!(s, "{i},{:?},{:?},{:?}", a.coefficient, c.times()[k], c.masses()[k]);
            for x in c.position(k) {
                let _ = write!(s, ",{x:?}");
            }
            s.push('\n');
        }
    }
    s
}

/// Output directory; remembers every file written for the provenance.
pub struct OutDir {
    root: PathBuf,
    written: Vec<String>,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|source| CliError::Io {
            path: root.to_path_buf(),
            source,
        })?;
        Ok(Self {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn written(&self) -> &[String] {
        &self.written
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<(), CliError> {
        let path = self.path(name);
        fs::write(&path, text).map_err(|source| CliError::Io { path, source })?;
        self.written.push(name.to_string());
        Ok(())
    }

    pub fn write_json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(CliError::runtime)?;
        text.push('\n');
        self.write_text(name, &text)
    }

    /// Header `<name>.json` plus a little-endian `f64` payload `<name>.bin`.
    pub fn write_field(&mut self, name: &str, fg: &FieldGrid) -> Result<(), CliError> {
        let header = format!("{name}.json");
        write_field_grid(fg, &self.path(&header), Encoding::F64Le).map_err(CliError::runtime)?;
        self.written.push(header);
        self.written.push(format!("{name}.bin"));
        Ok(())
    }
}
