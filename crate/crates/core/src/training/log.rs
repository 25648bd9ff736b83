use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{StepMetrics, TrainingError};

/// JSON-lines step log written to a file, standard output, or both.
pub struct TrainLog {
    file: Option<(PathBuf, BufWriter<File>)>,
    stdout: bool,
    history: Vec<StepMetrics>,
}

impl TrainLog {
    pub fn new(path: Option<&Path>, stdout: bool) -> Result<Self, TrainingError> {
        let file = match path {
            Some(p) => {
                let f = File::create(p).map_err(|source| TrainingError::Io {
                    path: p.to_path_buf(),
                    source,
                })?;
                Some((p.to_path_buf(), BufWriter::new(f)))
            }
            None => None,
        };
        Ok(Self {
            file,
            stdout,
            history: Vec::new(),
        })
    }

    /// Keeps the records in memory only.
    pub fn silent() -> Self {
        Self {
            file: None,
            stdout: false,
            history: Vec::new(),
        }
    }

    pub fn record(&mut self, m: &StepMetrics) -> Result<(), TrainingError> {
        let line = serde_json::to_string(m).expect("metrics serialize");
        if let Some((path, w)) = &mut self.file {
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .map_err(|source| TrainingError::Io {
                    path: path.clone(),
                    source,
                })?;
        }
        if self.stdout {
            println!("{line}");
        }
        self.history.push(m.clone());
        Ok(())
    }

    pub fn history(&self) -> &[StepMetrics] {
        &self.history
    }
}
