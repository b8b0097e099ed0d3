//! Builtin node commands. They read and write managed attribute files
//! under `$DAC_DIR/.dac/nodes/<stage>/` (the project root defaults to the
//! current directory) so pipelines can be exercised without any external
//! runtime.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::Subcommand;
use serde_json::{Map, Value};

use crate::Failure;

#[derive(Subcommand, Debug)]
pub enum Builtin {
    /// Read a float from a file, add a shift and record `result`.
    ShiftAdd {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        shift: String,
        /// Defaults to $DAC_STAGE.
        #[arg(long)]
        stage: Option<String>,
        /// Also record the result under this name in metrics.json.
        #[arg(long)]
        metric: Option<String>,
    },
    /// Write a scalar value to a file.
    GenData {
        #[arg(long, allow_hyphen_values = true)]
        value: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sum upstream attributes, data files and an optional shift.
    Consume {
        /// `<stage>.<attr>` of an upstream managed attribute.
        #[arg(long = "value-from")]
        value_from: Vec<String>,
        #[arg(long)]
        data: Vec<PathBuf>,
        #[arg(long, allow_hyphen_values = true)]
        shift: Option<String>,
        /// Record the sum as this stage's `result` attribute.
        #[arg(long)]
        stage: Option<String>,
        /// Also write the sum to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sleep, then optionally write the duration to a file.
    Sleep {
        #[arg(long)]
        seconds: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Exit with status 1.
    Fail {
        #[arg(long, default_value = "builtin fail node")]
        message: String,
    },
}

fn root() -> PathBuf {
    match std::env::var_os("DAC_DIR") {
        Some(d) if !d.is_empty() => PathBuf::from(d),
        _ => PathBuf::from("."),
    }
}

fn stage_name(stage: Option<String>) -> Result<String, Failure> {
    stage
        .or_else(|| std::env::var("DAC_STAGE").ok())
        .ok_or_else(|| Failure::user("no --stage given and DAC_STAGE is not set"))
}

fn parse_float(text: &str, what: &str) -> Result<f64, Failure> {
    text.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Failure::user(format!("{what}: '{}' is not a number", text.trim())))
}

fn read_float(path: &Path) -> Result<f64, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::user(format!("{}: {e}", path.display())))?;
    parse_float(&text, &path.display().to_string())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    let io = |e: std::io::Error| Failure {
        code: 2,
        message: format!("{}: {e}", path.display()),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    fs::write(path, bytes).map_err(io)
}

fn nodes_dir(stage: &str) -> PathBuf {
    root().join(".dac").join("nodes").join(stage)
}

/// Merge `values` into a managed JSON file.
fn record(stage: &str, file: &str, values: &[(&str, Value)]) -> Result<(), Failure> {
    let path = nodes_dir(stage).join(file);
    let mut doc = match fs::read(&path) {
        Ok(bytes) => serde_json::from_slice::<Map<String, Value>>(&bytes).unwrap_or_default(),
        Err(_) => Map::new(),
    };
    for (k, v) in values {
        doc.insert(k.to_string(), v.clone());
    }
    let text = serde_json::to_string(&doc).expect("JSON maps serialize");
    write_file(&path, text.as_bytes())
}

fn read_attr(reference: &str) -> Result<f64, Failure> {
    let (stage, attr) = reference
        .rsplit_once('.')
        .ok_or_else(|| Failure::user(format!("'{reference}' is not of the form <stage>.<attr>")))?;
    for file in ["outs.json", "metrics.json"] {
        let path = nodes_dir(stage).join(file);
        let Ok(bytes) = fs::read(&path) else { continue };
        let doc: Value = serde_json::from_slice(&bytes)
            .map_err(|e| Failure::user(format!("{}: {e}", path.display())))?;
        if let Some(v) = doc.get(attr) {
            return v
                .as_f64()
                .ok_or_else(|| Failure::user(format!("{reference} is not a number")));
        }
    }
    Err(Failure::user(format!("no value recorded for {reference}")))
}

fn number(v: f64) -> Value {
    serde_json::Number::from_f64(v).map_or(Value::Null, Value::Number)
}

pub fn run(cmd: Builtin) -> Result<(), Failure> {
    match cmd {
        Builtin::ShiftAdd {
            data,
            shift,
            stage,
            metric,
        } => {
            let stage = stage_name(stage)?;
            let result = read_float(&data)? + parse_float(&shift, "--shift")?;
            record(&stage, "outs.json", &[("result", number(result))])?;
            if let Some(m) = metric {
                record(&stage, "metrics.json", &[(m.as_str(), number(result))])?;
            }
            Ok(())
        }
        Builtin::GenData { value, out } => write_file(&out, value.as_bytes()),
        Builtin::Consume {
            value_from,
            data,
            shift,
            stage,
            out,
        } => {
            let mut sum = match shift {
                Some(s) => parse_float(&s, "--shift")?,
                None => 0.0,
            };
            for r in &value_from {
                sum += read_attr(r)?;
            }
            for d in &data {
                sum += read_float(d)?;
            }
            if let Some(out) = out {
                write_file(&out, number(sum).to_string().as_bytes())?;
            }
            if let Some(stage) = stage {
                record(&stage, "outs.json", &[("result", number(sum))])?;
            }
            Ok(())
        }
        Builtin::Sleep { seconds, out } => {
            if !(seconds.is_finite() && seconds >= 0.0) {
                return Err(Failure::user("--seconds must be a non-negative number"));
            }
            std::thread::sleep(Duration::from_secs_f64(seconds));
            match out {
                Some(out) => write_file(&out, number(seconds).to_string().as_bytes()),
                None => Ok(()),
            }
        }
        Builtin::Fail { message } => Err(Failure::user(message)),
    }
}
