//! Extensible adaptive-optimization runtime.
//!
//! A small SSA-based virtual machine whose running procedures are
//! continuously profiled, re-optimized in the background by pluggable
//! optimization phases, and hot-swapped via a reference-translation sweep.

pub mod ir;
pub mod loader;
pub mod manager;
pub mod optimizer;
pub mod profiling;
pub mod reference;
pub mod replacer;
pub mod similarity;
pub mod transport;
pub mod vm;

pub use ir::{build_ssa, validate_ir, ProcedureIR, ValidationReport};
pub use loader::{load_extension, load_module, ExecImage, ModuleStore};
pub use manager::{ManagerConfig, RunReport, System};
pub use reference::ReferenceInterpreter;
pub use transport::{parse_transport, print_module, TransportModule, TransportProcedure};
pub use vm::{PerfStats, ProcedureHandle, Value, Vm, VmError};
