use std::path::Path;

use boxseg::ba_unet::ArchConfig;
use boxseg::phantom::PhantomSpec;
use boxseg::preprocess::ProfileOverrides;
use boxseg::pseudo_mask::PseudoMaskParams;
use boxseg::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Contents of `--config`. Every section is optional; command-line flags
/// override whatever a section sets.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub phantom: Option<PhantomSpec>,
    pub profile: Option<ProfileOverrides>,
    pub pseudo_mask: Option<PseudoMaskParams>,
    pub train: Option<TrainConfig>,
    pub arch: Option<ArchConfig>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage("config", format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::usage("config", format!("{}: {e}", path.display())))
    }
}
