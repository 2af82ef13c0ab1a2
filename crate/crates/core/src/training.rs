//! End-to-end training from a session log: powertrain identification on the
//! transient windows, then slip regression on every window.

use crate::error::Result;
use crate::model::RobotGeometry;
use crate::powertrain::{identify_powertrain, PowertrainFit, PowertrainParams, SidePair};
use crate::protocol::{assemble_dataset, AssembledDataset, DriveDataset, SessionLog};
use crate::slip::{SlipDimension, SlipModel};

/// Seconds of commands attached before each transient window so the dead
/// time is covered.
pub const LEAD_IN_S: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub powertrain: SidePair<PowertrainParams>,
    pub powertrain_fit: SidePair<PowertrainFit>,
    pub slip: SlipModel,
    pub assembled: AssembledDataset,
}

/// Identifies both sides from the log's transient windows.
pub fn fit_powertrain(log: &SessionLog) -> Result<SidePair<PowertrainFit>> {
    let windows = log.transient_windows(LEAD_IN_S);
    Ok(SidePair::new(
        identify_powertrain(&windows.left)?,
        identify_powertrain(&windows.right)?,
    ))
}

/// Fits the slip posteriors on an assembled dataset.
pub fn fit_slip(dataset: &DriveDataset, phi: f64) -> Result<SlipModel> {
    let designs = SlipDimension::ALL.map(|d| dataset.design(d));
    let targets = SlipDimension::ALL.map(|d| dataset.targets(d));
    SlipModel::fit(
        [&designs[0], &designs[1], &designs[2]],
        [&targets[0], &targets[1], &targets[2]],
        phi,
    )
}

pub fn train(log: &SessionLog, geom: &RobotGeometry, phi: f64) -> Result<TrainedModel> {
    train_with(log, geom, phi, SlipInput::PredictedWheels)
}

/// Wheel speeds the slip regression is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SlipInput {
    /// Speeds predicted by the identified powertrain from the commands.
    #[default]
    PredictedWheels,
    /// Raw encoder measurements.
    MeasuredWheels,
}

pub fn train_with(
    log: &SessionLog,
    geom: &RobotGeometry,
    phi: f64,
    input: SlipInput,
) -> Result<TrainedModel> {
    let fit = fit_powertrain(log)?;
    let powertrain = SidePair::new(fit.left.params, fit.right.params);
    let lag = match input {
        SlipInput::PredictedWheels => Some(powertrain),
        SlipInput::MeasuredWheels => None,
    };
    let assembled = assemble_dataset(log, geom, lag)?;
    let slip = fit_slip(&assembled.dataset, phi)?;
    Ok(TrainedModel {
        powertrain,
        powertrain_fit: fit,
        slip,
        assembled,
    })
}
