pub mod audio;
pub mod boundary;
pub mod denoise;
pub mod report;

pub use boundary::{
    gen_dataset, run_boundary_experiment, run_boundary_study, ArmSummary, BoundaryConfig, BoundaryRun, BoundaryStudy, Dataset2D,
    DatasetKind,
};
pub use denoise::{run_denoise_experiment, DenoiseConfig, DenoiseModel, DenoiseOutcome, MixerOutcome};
pub use report::{read_grid_csv, render_ppm, write_grid_csv, write_timings, GridPoint, RunReport};
