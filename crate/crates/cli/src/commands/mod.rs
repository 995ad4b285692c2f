pub mod gradcam;
pub mod phantom_gen;
pub mod run;

pub use gradcam::{run_gradcam, GradcamArgs, GradcamOutputs, SaliencyStats};
pub use phantom_gen::{format_summary, phantom_gen, PhantomGenArgs};
pub use run::{run_experiment, run_from_file, RunSummary};
