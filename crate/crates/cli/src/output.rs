use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

pub const SCHEMA: &str = "vecot/1";

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or unreadable input. Exit 2.
    Usage(String),
    Core(vecot_core::Error),
    /// Failure to write results. Exit 4.
    Write(PathBuf, std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use vecot_core::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Write(..) => 4,
            CliError::Core(E::IterLimit { .. }) => 3,
            CliError::Core(E::NumericalBreakdown(_)) => 4,
            CliError::Core(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => f.write_str(msg),
            CliError::Core(err) => write!(f, "{err}"),
            CliError::Write(path, err) => write!(f, "cannot write {}: {err}", path.display()),
        }
    }
}

impl From<vecot_core::Error> for CliError {
    fn from(err: vecot_core::Error) -> Self {
        CliError::Core(err)
    }
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    serde_json::from_str(&read_text(path)?)
        .map_err(|e| CliError::Usage(format!("cannot parse {}: {e}", path.display())))
}

pub fn to_value<T: Serialize>(value: &T) -> Result<Value, CliError> {
    serde_json::to_value(value).map_err(|e| CliError::Core(e.into()))
}

/// `{"schema", "command", "config", "result"}`, pretty-printed with a
/// trailing newline.
pub fn write_document(target: Option<&Path>, command: &str, config: Value, result: Value) -> Result<(), CliError> {
    let doc = serde_json::json!({
        "schema": SCHEMA,
        "command": command,
        "config": config,
        "result": result,
    });
    let mut text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::Core(e.into()))?;
    text.push('\n');
    match target {
        Some(path) => fs::write(path, text).map_err(|e| CliError::Write(path.to_path_buf(), e)),
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            lock.write_all(text.as_bytes())
                .and_then(|()| lock.flush())
                .map_err(|e| CliError::Write(PathBuf::from("<stdout>"), e))
        }
    }
}

/// CSV sidecar writer rooted at `--csv-dir`.
pub struct Sidecars {
    dir: PathBuf,
}

impl Sidecars {
    pub fn new(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Write(dir.to_path_buf(), e))?;
        Ok(Sidecars { dir: dir.to_path_buf() })
    }

    /// Writes `name` with a header row and returns its path for the document.
    pub fn write<I>(&self, name: &str, header: &[String], rows: I) -> Result<String, CliError>
    where
        I: IntoIterator<Item = Vec<String>>,
    {
        let path = self.dir.join(name);
        let fail = |e: csv::Error| CliError::Write(path.clone(), std::io::Error::other(e));
        let mut writer = csv::Writer::from_path(&path).map_err(fail)?;
        writer.write_record(header).map_err(fail)?;
        for row in rows {
            writer.write_record(&row).map_err(fail)?;
        }
        writer.flush().map_err(|e| CliError::Write(path.clone(), e))?;
        Ok(path.display().to_string())
    }
}

/// Shortest round-trip decimal form, as in the JSON output.
pub fn num(x: f64) -> String {
    if x.is_finite() {
        format!("{x:?}")
    } else {
        x.to_string()
    }
}

pub fn columns(prefix: &str, count: usize) -> impl Iterator<Item = String> + '_ {
    (0..count).map(move |c| format!("{prefix}{c}"))
}
