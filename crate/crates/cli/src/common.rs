//! Plumbing shared by the subcommands: exit-code policy, output-directory
//! handling, config loading and echoing, and worker-pool construction.

use std::fs;
use std::path::Path;

use saasr_core::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Maps an error to the process exit code: 3 for a runtime abort on a
/// non-finite loss, 4 for mismatched inputs when scoring, 2 for everything
/// else (bad configuration, bad files, infeasible requests).
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::NonFiniteLoss { .. } => 3,
        Error::IdMismatch(_) => 4,
        _ => 2,
    }
}

/// Creates the output directory, refusing an existing one unless `force`.
pub fn prepare_out_dir(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        if !force {
            return Err(Error::InvalidArgument(format!(
                "output directory {} already exists; pass --force to write into it",
                out.display()
            )));
        }
    } else {
        fs::create_dir_all(out)?;
    }
    Ok(())
}

/// Writes the effective configuration into the output directory, so any
/// run can be replayed from its artifacts alone.
pub fn echo_config<T: Serialize>(out: &Path, config: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(config)?;
    text.push('\n');
    fs::write(out.join("config.json"), text)?;
    Ok(())
}

/// Loads a JSON config file when given, otherwise the type's defaults.
/// Unknown keys are rejected by the config types themselves.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p)?;
            serde_json::from_str(&text)
                .map_err(|e| Error::MalformedFile(format!("{}: {e}", p.display())))
        }
        None => Ok(T::default()),
    }
}

/// Builds the worker pool for per-sample parallelism; `jobs == 0` means one
/// worker per core.
pub fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot build worker pool: {e}")))
}

/// Resolves a dataset argument: a directory means its conventional file,
/// anything else is used as-is.
pub fn resolve_data_path(path: &Path, default_file: &str) -> std::path::PathBuf {
    if path.is_dir() {
        path.join(default_file)
    } else {
        path.to_path_buf()
    }
}
