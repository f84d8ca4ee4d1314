//! Run configuration file: run settings, backend descriptors, prompt
//! template, extraction rules and dataset defaults in one JSON object.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use thiserror::Error;

use crate::backend::{Backend, HttpBackend, HttpBackendConfig, StubBackend, StubScript};
use crate::dataset::ManifestDefaults;
use crate::filters::{AnswerExtractor, ExtractionRule};
use crate::prompt::PromptTemplate;
use crate::runner::RunConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid configuration {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

/// Stub script given inline or as a path to a JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptSource {
    Path(PathBuf),
    Inline(StubScript),
}

/// Which backend to build. An object without `kind` is an HTTP descriptor.
#[derive(Debug, Clone, PartialEq)]
pub enum BackendDescriptor {
    Http(HttpBackendConfig),
    Stub { script: Option<ScriptSource> },
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum TaggedDescriptor {
    Http(HttpBackendConfig),
    Stub {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        script: Option<ScriptSource>,
    },
}

impl Serialize for BackendDescriptor {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self.clone() {
            BackendDescriptor::Http(c) => TaggedDescriptor::Http(c),
            BackendDescriptor::Stub { script } => TaggedDescriptor::Stub { script },
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BackendDescriptor {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let mut value = Value::deserialize(deserializer)?;
        if let Value::Object(map) = &mut value {
            map.entry("kind").or_insert_with(|| Value::String("http".into()));
        }
        let tagged: TaggedDescriptor = serde_json::from_value(value).map_err(serde::de::Error::custom)?;
        Ok(match tagged {
            TaggedDescriptor::Http(c) => BackendDescriptor::Http(c),
            TaggedDescriptor::Stub { script } => BackendDescriptor::Stub { script },
        })
    }
}

fn read_script(path: &Path) -> Result<StubScript, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
        path: path.to_path_buf(),
        source,
    })
}

impl BackendDescriptor {
    pub fn model_name(&self) -> Option<&str> {
        match self {
            BackendDescriptor::Http(c) => Some(&c.model_name),
            BackendDescriptor::Stub { .. } => None,
        }
    }

    /// Override the model name. A stub script file is read and inlined.
    pub fn set_model_name(&mut self, name: &str) -> Result<(), ConfigError> {
        match self {
            BackendDescriptor::Http(c) => c.model_name = name.to_string(),
            BackendDescriptor::Stub { script } => {
                let mut inline = match script.take() {
                    None => StubScript::default(),
                    Some(ScriptSource::Inline(s)) => s,
                    Some(ScriptSource::Path(p)) => read_script(&p)?,
                };
                inline.model_name = Some(name.to_string());
                *script = Some(ScriptSource::Inline(inline));
            }
        }
        Ok(())
    }

    /// Resolve a relative script path against `base`.
    fn rebase(&mut self, base: &Path) {
        if let BackendDescriptor::Stub { script: Some(ScriptSource::Path(p)) } = self {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn build(&self) -> Result<Arc<dyn Backend>, ConfigError> {
        match self {
            BackendDescriptor::Http(c) => Ok(Arc::new(
                HttpBackend::new(c).map_err(|e| ConfigError::Invalid(e.to_string()))?,
            )),
            BackendDescriptor::Stub { script } => {
                let script = match script {
                    None => StubScript::default(),
                    Some(ScriptSource::Inline(s)) => s.clone(),
                    Some(ScriptSource::Path(p)) => read_script(p)?,
                };
                Ok(Arc::new(
                    StubBackend::from_script(&script).map_err(|e| ConfigError::Invalid(e.to_string()))?,
                ))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    #[serde(flatten)]
    pub run: RunConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    pub backend: BackendDescriptor,
    /// Backend used to restate answers the rules cannot find.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extractor: Option<BackendDescriptor>,
    #[serde(default)]
    pub template: PromptTemplate,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extraction_rules: Vec<ExtractionRule>,
    #[serde(default)]
    pub dataset_defaults: ManifestDefaults,
}

impl EvalConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Read a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = Self::from_json(&text, path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = config.dataset.as_mut() {
            rebase(p);
        }
        if let Some(p) = config.run.cache_dir.as_mut() {
            rebase(p);
        }
        rebase(&mut config.run.output_dir);
        config.backend.rebase(base);
        if let Some(e) = config.extractor.as_mut() {
            e.rebase(base);
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.run.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.template.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.filters()?;
        Ok(())
    }

    pub fn filters(&self) -> Result<AnswerExtractor, ConfigError> {
        AnswerExtractor::with_rules(&self.extraction_rules).map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}
