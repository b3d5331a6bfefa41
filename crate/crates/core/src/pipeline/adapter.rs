//! Seams for external models. An adapter is bound per role to the
//! synthetic backend, a JSON file, or an external command speaking one JSON
//! request on stdin and one JSON response on stdout.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::metrics::{LabelClassifier, PrototypeClassifier};

pub const ADAPTER_PATH_ENV: &str = "SSV2A_ADAPTER_PATH";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    VisualEncoder,
    AudioEncoder,
    TextPrior,
    Detector,
    AudioGenerator,
    AudioClassifier,
    ImageMapper,
}

impl Role {
    pub const ALL: [Role; 7] = [
        Role::VisualEncoder,
        Role::AudioEncoder,
        Role::TextPrior,
        Role::Detector,
        Role::AudioGenerator,
        Role::AudioClassifier,
        Role::ImageMapper,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Role::VisualEncoder => "visual_encoder",
            Role::AudioEncoder => "audio_encoder",
            Role::TextPrior => "text_prior",
            Role::Detector => "detector",
            Role::AudioGenerator => "audio_generator",
            Role::AudioClassifier => "audio_classifier",
            Role::ImageMapper => "image_mapper",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AdapterBinding {
    Synthetic {},
    /// A JSON document returned as the response to every request.
    File { path: PathBuf },
    ExternalCommand {
        command: String,
        #[serde(default)]
        args: Vec<String>,
    },
}

impl AdapterBinding {
    pub fn validate(&self, role: Role) -> Result<()> {
        match self {
            AdapterBinding::Synthetic {} if role == Role::ImageMapper => Err(Error::Config(
                "adapter role `image_mapper` has no synthetic stand-in".into(),
            )),
            AdapterBinding::File { .. } if role == Role::AudioGenerator => Err(Error::Config(
                "adapter role `audio_generator` cannot be bound to a file".into(),
            )),
            AdapterBinding::ExternalCommand { command, .. } if command.is_empty() => {
                Err(Error::Config(format!("adapter role `{}` has an empty command", role.name())))
            }
            _ => Ok(()),
        }
    }

    /// Sends `{"role", "input"}` and returns the response's `output`.
    pub fn call(&self, role: Role, input: Value) -> Result<Value> {
        let fail = |message: String| Error::Adapter {
            role: role.name().to_string(),
            message,
        };
        match self {
            AdapterBinding::Synthetic {} => Err(fail("the synthetic backend is handled in-process".into())),
            AdapterBinding::File { path } => {
                let text = std::fs::read_to_string(path).map_err(|e| fail(format!("{}: {e}", path.display())))?;
                serde_json::from_str(&text).map_err(|e| fail(format!("{}: {e}", path.display())))
            }
            AdapterBinding::ExternalCommand { command, args } => {
                let program = resolve_command(command);
                let mut child = Command::new(&program)
                    .args(args)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::piped())
                    .spawn()
                    .map_err(|e| fail(format!("cannot start `{}`: {e}", program.display())))?;
                let request = json!({ "role": role.name(), "input": input });
                {
                    let mut stdin = child.stdin.take().expect("piped stdin");
                    serde_json::to_writer(&mut stdin, &request).map_err(|e| fail(e.to_string()))?;
                    stdin.write_all(b"\n").map_err(|e| fail(e.to_string()))?;
                }
                let out = child.wait_with_output().map_err(|e| fail(e.to_string()))?;
                if !out.status.success() {
                    return Err(fail(format!(
                        "exited with {}: {}",
                        out.status,
                        String::from_utf8_lossy(&out.stderr).trim()
                    )));
                }
                let response: Value =
                    serde_json::from_slice(&out.stdout).map_err(|e| fail(format!("bad response: {e}")))?;
                response
                    .get("output")
                    .cloned()
                    .ok_or_else(|| fail("response has no `output` field".into()))
            }
        }
    }
}

/// Bare command names are looked up in `SSV2A_ADAPTER_PATH` first, then
/// left to the system search path.
pub fn resolve_command(command: &str) -> PathBuf {
    let path = Path::new(command);
    if path.components().count() > 1 {
        return path.to_path_buf();
    }
    if let Some(dirs) = std::env::var_os(ADAPTER_PATH_ENV) {
        for dir in std::env::split_paths(&dirs) {
            let candidate = dir.join(command);
            if candidate.is_file() {
                return candidate;
            }
        }
    }
    path.to_path_buf()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PrototypeFile {
    labels: Vec<String>,
    prototypes: Vec<Vec<f32>>,
}

/// Classifier behind an external command: request `{"embedding": [..]}`,
/// response `{"scores": {"label": score, ..}}`.
pub struct CommandClassifier {
    pub binding: AdapterBinding,
}

impl LabelClassifier for CommandClassifier {
    fn scores(&self, embedding: &[f32]) -> Result<Vec<(String, f64)>> {
        let out = self.binding.call(Role::AudioClassifier, json!({ "embedding": embedding }))?;
        let scores = out.get("scores").and_then(Value::as_object).ok_or_else(|| Error::Adapter {
            role: Role::AudioClassifier.name().into(),
            message: "response output has no `scores` object".into(),
        })?;
        scores
            .iter()
            .map(|(k, v)| {
                v.as_f64().map(|s| (k.clone(), s)).ok_or_else(|| Error::Adapter {
                    role: Role::AudioClassifier.name().into(),
                    message: format!("score for `{k}` is not a number"),
                })
            })
            .collect()
    }
}

/// Builds the label classifier for `binding`. The synthetic backend uses
/// `synthetic` (nearest class prototypes); a file holds
/// `{"labels": [..], "prototypes": [[..], ..]}`.
pub fn classifier(binding: &AdapterBinding, synthetic: PrototypeClassifier) -> Result<Box<dyn LabelClassifier>> {
    match binding {
        AdapterBinding::Synthetic {} => Ok(Box::new(synthetic)),
        AdapterBinding::File { .. } => {
            let doc: PrototypeFile = serde_json::from_value(binding.call(Role::AudioClassifier, Value::Null)?)
                .map_err(|e| Error::Adapter {
                    role: Role::AudioClassifier.name().into(),
                    message: e.to_string(),
                })?;
            if doc.labels.len() != doc.prototypes.len() {
                return Err(Error::Adapter {
                    role: Role::AudioClassifier.name().into(),
                    message: "labels and prototypes differ in count".into(),
                });
            }
            Ok(Box::new(PrototypeClassifier {
                labels: doc.labels,
                prototypes: doc.prototypes,
            }))
        }
        AdapterBinding::ExternalCommand { .. } => Ok(Box::new(CommandClassifier {
            binding: binding.clone(),
        })),
    }
}
