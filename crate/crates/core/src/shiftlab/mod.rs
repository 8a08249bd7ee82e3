//! Shift lab: synthetic shifts, interventions and the experiment drivers.

pub mod shift;

pub use shift::{inject, schedule_shifts, Ramp, ShiftKind, ShiftState};
pub mod system;

pub use system::{
    probe_network, AnyMonitor, FeatureSource, InterventionKind, LabConfig, MonitorBank, MonitorKind, MonitorSpec,
    System, RETRAIN_DECAY, RETRAIN_WINDOW,
};
pub mod detection;

pub use detection::{
    brightness_tap, designated_monitor, detection_monitors, race_designated, run_detection_trial, run_monitor_race,
    select_sensitive_tap, MonitorRecord, RaceResult, TrialResult,
};
pub mod intervention;

pub use intervention::{run_intervention_trial, Arm, InterventionResult, MSE_WINDOW, PRE_SHIFT_EPISODES};
pub mod lifecycle;

pub use lifecycle::{run_lifecycle, run_lifecycle_with_schedule, LifecycleConfig, LifecycleReport, Policy};
