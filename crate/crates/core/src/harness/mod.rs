//! Case-study orchestration: scenarios, metrics, data sweeps, comparisons.

pub mod compare;
pub mod dataset;
pub mod metrics;
pub mod record;
pub mod ref11;
pub mod scenario;

use crate::network::ControllerKind;
use crate::pinn::PinnModel;
use crate::SimError;
use scenario::ControllerChoice;
use std::path::PathBuf;
use std::sync::Arc;

/// Where the neural controller comes from, if one is needed.
#[derive(Debug, Clone, Default)]
pub enum ModelSource {
    #[default]
    None,
    File(PathBuf),
    Loaded(Arc<PinnModel>),
}

pub fn controller_for(choice: ControllerChoice, model: &ModelSource) -> Result<ControllerKind, SimError> {
    Ok(match choice {
        ControllerChoice::Droop => ControllerKind::Droop,
        ControllerChoice::Ref11 => ControllerKind::Ref11(ref11::Ref11Params::default()),
        ControllerChoice::Pinn => match model {
            ModelSource::None => return Err(SimError::Config("the pinn controller needs --model".into())),
            ModelSource::File(p) => ControllerKind::Pinn(Arc::new(PinnModel::load(p)?)),
            ModelSource::Loaded(m) => ControllerKind::Pinn(m.clone()),
        },
    })
}
