use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::{Prediction, TrainedQeModel};
use super::QeError;

pub const CHECKPOINT_FORMAT: &str = "qelab-checkpoint/1";

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    #[serde(flatten)]
    model: TrainedQeModel,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> QeError + '_ {
    move |source| QeError::Io { path: path.display().to_string(), source }
}

fn create(path: &Path) -> Result<BufWriter<File>, QeError> {
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn open(path: &Path) -> Result<BufReader<File>, QeError> {
    Ok(BufReader::new(File::open(path).map_err(io_err(path))?))
}

/// JSON checkpoint holding config, base, adapters, head and loss trace.
pub fn save_checkpoint(m: &TrainedQeModel, path: &Path) -> Result<(), QeError> {
    let mut w = create(path)?;
    let ck = Checkpoint { format: CHECKPOINT_FORMAT.into(), model: m.clone() };
    serde_json::to_writer(&mut w, &ck)?;
    w.flush().map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainedQeModel, QeError> {
    let value: serde_json::Value = serde_json::from_reader(open(path)?)?;
    match value.get("format").and_then(|f| f.as_str()) {
        Some(CHECKPOINT_FORMAT) => {}
        other => return Err(QeError::Format(format!("{}: unsupported checkpoint format {other:?}", path.display()))),
    }
    let ck: Checkpoint = serde_json::from_value(value)?;
    Ok(ck.model)
}

/// `epoch,mean_mse` rows, epochs 1-based.
pub fn write_loss_csv(trace: &[f64], path: &Path) -> Result<(), QeError> {
    let mut w = create(path)?;
    let mut body = String::from("epoch,mean_mse\n");
    for (i, v) in trace.iter().enumerate() {
        body.push_str(&format!("{},{v}\n", i + 1));
    }
    w.write_all(body.as_bytes()).and_then(|_| w.flush()).map_err(io_err(path))
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<f64>, QeError> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if i == 0 {
            if line != "epoch,mean_mse" {
                return Err(QeError::Format(format!("{}: bad loss header {line:?}", path.display())));
            }
            continue;
        }
        let v = line.split_once(',').and_then(|(_, v)| v.parse().ok());
        out.push(v.ok_or_else(|| QeError::Format(format!("{}:{}: bad loss row", path.display(), i + 1)))?);
    }
    Ok(out)
}

/// One `{"id", "prediction", "gold"}` object per line.
pub fn write_predictions(preds: &[Prediction], path: &Path) -> Result<(), QeError> {
    let mut w = create(path)?;
    for p in preds {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>, QeError> {
    let mut out = Vec::new();
    for line in open(path)?.lines() {
        let line = line.map_err(io_err(path))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
