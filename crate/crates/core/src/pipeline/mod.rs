//! Data preparation: scaling, non-overlapping windows, score reassembly and
//! the CSV formats used on disk.

mod csvio;
mod scaler;
mod series;
mod windows;

pub use csvio::{load_csv, load_dataset_dir, read_scores_csv, save_dataset_dir, write_csv, write_scores_csv};
pub use scaler::{Scaler, ScalerKind};
pub use series::LabeledSeries;
pub use windows::{concat_scores, make_windows, ScoreSeries, WindowSet};

/// Default window length.
pub const DEFAULT_WINDOW: usize = 100;
