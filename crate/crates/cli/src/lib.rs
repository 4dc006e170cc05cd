//! Scenario engine and command-line surface for the spatio-temporal
//! degradation library: synthetic studies with the adaptive and baseline
//! observation methods, replication over seeded parallel workers, and
//! error-table aggregation.

pub mod replicate;
pub mod scenario;
pub mod table;

pub use replicate::{run_method, run_scenario, LatentField};
pub use scenario::{
    build_plans, engineering_plan, real_case_scenario, synthetic_scenario, Method, MethodPlan,
    ScenarioConfig,
};
pub use table::{config_hash, ErrorTable, MethodErrors};
