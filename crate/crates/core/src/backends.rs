//! Bundles the pluggable stage backends so pipeline entry points take one
//! handle. The deterministic bundle (rule labeler, synthetic grounder, rule
//! judge, rules refiner) is what the acceptance experiments run on.

use std::sync::Arc;

use crate::grounding::{GroundingBackend, SyntheticGrounder, SyntheticGrounderConfig};
use crate::labeler::{LabelerBackend, RuleLabeler};
use crate::refine::{RefineBackend, RulesRefiner};
use crate::spl::{JudgeBackend, RuleJudge};
use crate::Result;

#[derive(Clone)]
pub struct Backends {
    pub labeler: Arc<dyn LabelerBackend>,
    pub grounder: Arc<dyn GroundingBackend>,
    pub judge: Arc<dyn JudgeBackend>,
    pub refiner: Arc<dyn RefineBackend>,
}

impl Backends {
    /// The hermetic deterministic bundle.
    pub fn deterministic(grounder_cfg: SyntheticGrounderConfig) -> Result<Self> {
        Ok(Backends {
            labeler: Arc::new(RuleLabeler),
            grounder: Arc::new(SyntheticGrounder::new(grounder_cfg)?),
            judge: Arc::new(RuleJudge::default()),
            refiner: Arc::new(RulesRefiner::default()),
        })
    }
}
