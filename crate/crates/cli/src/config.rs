//! Run configuration: a TOML file whose values command-line flags override.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use causal_prompt::classifier::TrainConfig;
use causal_prompt::corpus::ColumnSchema;
use causal_prompt::gateway::{GatewayConfig, GatewayKind, StubEmbedder, StubGenerator, StubMlm};
use causal_prompt::prompting::{load_templates, DEFAULT_DEMO_FRACTION};
use causal_prompt::Verbalizer;

/// Overrides the cache directory of every gateway that does not set one.
pub const CACHE_DIR_ENV: &str = "CAUSAL_PROMPT_CACHE_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub text_column: String,
    pub label_column: String,
    /// Empty string: ids are the zero-based row index.
    pub id_column: String,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            train: None,
            dev: None,
            text_column: "text".into(),
            label_column: "label".into(),
            id_column: "id".into(),
        }
    }
}

impl CorpusSection {
    pub fn schema(&self) -> ColumnSchema {
        ColumnSchema {
            id: (!self.id_column.is_empty()).then(|| self.id_column.clone()),
            text: self.text_column.clone(),
            label: self.label_column.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSection {
    pub m: Option<usize>,
    pub beam_width: usize,
    pub finalists: usize,
    pub seeds_per_template: usize,
    pub rank_d: Option<usize>,
    pub dev_d: usize,
    pub demo_fraction: f64,
    /// Candidate templates served by the stub generator, one per line.
    pub templates: Option<PathBuf>,
}

impl Default for SearchSection {
    fn default() -> Self {
        Self {
            m: None,
            beam_width: 100,
            finalists: 10,
            seeds_per_template: 1,
            rank_d: None,
            dev_d: 1,
            demo_fraction: DEFAULT_DEMO_FRACTION,
            templates: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifySection {
    pub d: usize,
    pub demo_fraction: f64,
}

impl Default for ClassifySection {
    fn default() -> Self {
        Self {
            d: 1,
            demo_fraction: DEFAULT_DEMO_FRACTION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FuseSection {
    pub restarts: usize,
}

impl Default for FuseSection {
    fn default() -> Self {
        Self { restarts: 10_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewaySection {
    pub mlm: GatewayConfig,
    pub embedder: GatewayConfig,
    pub generator: GatewayConfig,
}

impl Default for GatewaySection {
    fn default() -> Self {
        Self {
            mlm: GatewayConfig::stub("stub-mlm"),
            embedder: GatewayConfig::stub("stub-embedder"),
            generator: GatewayConfig::stub("stub-generator"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub corpus: CorpusSection,
    pub split: SplitSection,
    pub search: SearchSection,
    pub classify: ClassifySection,
    pub fuse: FuseSection,
    pub verbalizer: Verbalizer,
    pub gateways: GatewaySection,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut config = match path {
            Some(path) => {
                let body =
                    std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
                toml::from_str(&body).with_context(|| format!("parsing config {}", path.display()))?
            }
            None => RunConfig::default(),
        };
        if let Ok(dir) = std::env::var(CACHE_DIR_ENV) {
            for g in [
                &mut config.gateways.mlm,
                &mut config.gateways.embedder,
                &mut config.gateways.generator,
            ] {
                if g.cache_dir.is_none() {
                    g.cache_dir = Some(PathBuf::from(&dir));
                }
            }
        }
        Ok(config)
    }

    pub fn mlm(&self) -> Result<StubMlm> {
        let g = &self.gateways.mlm;
        require_stub("mlm", g)?;
        Ok(StubMlm::with_descriptor(g.descriptor()?, g.seed))
    }

    pub fn embedder(&self) -> Result<StubEmbedder> {
        require_stub("embedder", &self.gateways.embedder)?;
        Ok(StubEmbedder::default())
    }

    pub fn generator(&self) -> Result<StubGenerator> {
        require_stub("generator", &self.gateways.generator)?;
        let Some(path) = &self.search.templates else {
            bail!("the stub generator needs a candidate template file (search.templates or --templates)");
        };
        Ok(StubGenerator::from_templates(&load_templates(path)?)?)
    }
}

fn require_stub(role: &str, g: &GatewayConfig) -> Result<()> {
    if g.kind != GatewayKind::Stub {
        bail!(
            "gateway '{role}' has kind {:?}, but this build only ships stub backends",
            g.kind
        );
    }
    Ok(())
}

/// Fails unless every path exists.
pub fn check_paths<'a>(paths: impl IntoIterator<Item = (&'a str, &'a Path)>) -> Result<()> {
    for (role, path) in paths {
        if !path.exists() {
            bail!("{role} file {} does not exist", path.display());
        }
    }
    Ok(())
}
