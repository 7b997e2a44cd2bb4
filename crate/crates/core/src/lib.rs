//! meshtrain: a desk-scale laboratory for composable n-D parallel training.
//!
//! The crate simulates a multi-rank training cluster on threads: rank workers
//! exchange tensors through deterministic rendezvous collectives, models are
//! sharded with an explicit placement algebra over named device meshes, and
//! every parallelism (fully sharded / hybrid data parallel, tensor + sequence
//! parallel, pipeline schedules, ring-attention context parallel) is verified
//! against a single-rank oracle for exact loss agreement. No GPUs, no network
//! — the point is to make the *algebra* of distributed training inspectable
//! and testable on a laptop.
//!
//! Start with [`runtime::spawn_world`] to run a function on every simulated
//! rank, or with the `meshtrain` CLI (see the guide in `book/`) for full
//! training runs driven by a TOML config.

pub mod checkpoint;
pub mod config;
pub mod context_parallel;
pub mod data;
pub mod dtensor;
pub mod model;
pub mod parallel;
pub mod perf;
pub mod pipeline;
pub mod runtime;
pub mod tensor;
pub mod trainer;

// The mdbook guide's code blocks compile and run as doctests so the book can
// never drift from the API. `cargo test --doc` exercises them.
#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            pub struct $name;
        };
    }
    chapter!(Introduction, "../../../book/src/introduction.md");
    chapter!(Tensors, "../../../book/src/tensors.md");
    chapter!(World, "../../../book/src/world.md");
    chapter!(Sharding, "../../../book/src/sharding.md");
    chapter!(DataParallel, "../../../book/src/data_parallel.md");
    chapter!(TensorParallel, "../../../book/src/tensor_parallel.md");
    chapter!(Pipeline, "../../../book/src/pipeline.md");
    chapter!(ContextParallel, "../../../book/src/context_parallel.md");
    chapter!(
        MemoryAndPrecision,
        "../../../book/src/memory_and_precision.md"
    );
    chapter!(Checkpoints, "../../../book/src/checkpoints.md");
    chapter!(Debugging, "../../../book/src/debugging.md");
    chapter!(Performance, "../../../book/src/performance.md");
    chapter!(CommandLine, "../../../book/src/cli.md");
}
