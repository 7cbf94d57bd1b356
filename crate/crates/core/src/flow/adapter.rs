use std::path::PathBuf;
use std::process::Command;

use super::{load_flow, FlowEstimator, FlowField};
use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::io::save_frame;

/// Runs an external flow model as a subprocess.
///
/// The command line is a program followed by arguments in which `{a}`,
/// `{b}`, `{out}` and `{weights}` are substituted with the two input PNGs,
/// the flow dump the model must write (see [`super::write_flow`]) and the
/// weight file.
#[derive(Clone, Debug)]
pub struct ExternalAdapter {
    pub command: Vec<String>,
    pub weights: Option<PathBuf>,
}

impl ExternalAdapter {
    pub fn new(command: Vec<String>, weights: Option<PathBuf>) -> Result<Self> {
        if command.is_empty() {
            return Err(Error::InvalidArgument("adapter command is empty".into()));
        }
        Ok(Self { command, weights })
    }

    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Estimator {
            estimator: self.name().into(),
            message: message.into(),
        }
    }
}

impl FlowEstimator for ExternalAdapter {
    fn name(&self) -> &str {
        "adapter"
    }

    fn estimate(&self, a: &Frame, b: &Frame) -> Result<FlowField> {
        let weights = match &self.weights {
            Some(w) if !w.is_file() => {
                return Err(self.fail(format!("weights file {} not found", w.display())))
            }
            Some(w) => w.display().to_string(),
            None => String::new(),
        };
        let dir = tempfile::tempdir().map_err(|e| self.fail(e.to_string()))?;
        let (pa, pb, pout) = (dir.path().join("a.png"), dir.path().join("b.png"), dir.path().join("flow.bin"));
        save_frame(a, &pa)?;
        save_frame(b, &pb)?;
        let subst = |s: &str| {
            s.replace("{a}", &pa.display().to_string())
                .replace("{b}", &pb.display().to_string())
                .replace("{out}", &pout.display().to_string())
                .replace("{weights}", &weights)
        };
        let status = Command::new(subst(&self.command[0]))
            .args(self.command[1..].iter().map(|s| subst(s)))
            .status()
            .map_err(|e| self.fail(format!("cannot run `{}`: {e}", self.command[0])))?;
        if !status.success() {
            return Err(self.fail(format!("`{}` exited with {status}", self.command[0])));
        }
        let flow = load_flow(&pout).map_err(|e| self.fail(e.to_string()))?;
        if flow.height() != a.height() || flow.width() != a.width() {
            return Err(self.fail("flow size does not match the input frames"));
        }
        Ok(flow)
    }
}
