//! Test fixtures and oracles shared by the runtimebox test suites.
//!
//! Nothing here depends on the runtimebox crates: the directory diff and
//! tree generator are independent of the code under test.

pub mod dirdiff;
pub mod http;
pub mod rootfs;
pub mod treegen;

pub use dirdiff::{diff_dirs, tree_digest};
pub use http::StaticServer;
pub use rootfs::build_fixture_rootfs;
pub use treegen::{random_tree, TreeGenConfig};
