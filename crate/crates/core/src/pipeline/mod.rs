//! End-to-end workflows: evaluation sweeps, scan simulation with shot
//! accounting, PSNR and error maps, and the cell-count proxy.

pub mod count;
pub mod eval;
pub mod metrics;
pub mod report;
pub mod scan;

pub use count::cell_count;
pub use eval::{evaluate, EvalOptions};
pub use metrics::{error_map, error_map_with_ceiling, psnr, ERROR_MAP_CEILING, PSNR_CAP_DB};
pub use report::{group_rows, EvalReport, EvalRow, GroupSummary, MeanSd, ShotCounts};
pub use scan::{scan_simulate, ScanPlan, ScanTile, ShotPolicy};
