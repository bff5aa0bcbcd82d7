//! Reproducible software runtimes.
//!
//! A runtime is a complete filesystem tree, identified as
//! `name/arch/version`, stored in a content-addressed repository and
//! fetched from static HTTP mirrors. Deployed runtimes are run inside an
//! unprivileged user namespace on top of a copy-on-write overlay, so the
//! published tree stays bit-exact while local edits persist separately and
//! can be reset.
//!
//! Modules, bottom-up:
//!
//! - [`refmodel`]: runtime references, manifests, command resolution
//! - [`casstore`]: the object store (files, trees, commits, refs, checkout, fsck)
//! - [`remote`]: pull from and export to static mirrors
//! - [`deploy`]: the `rofs`/`rwfs`/`tmpfs`/`live` deployment layout
//! - [`sandbox`]: overlay mounts, namespaces and the pid-1 reaper
//! - [`packager`]: authoring and committing new runtimes

pub mod casstore;
pub mod deploy;
mod error;
pub mod fsutil;
pub mod packager;
pub mod paths;
pub mod refmodel;
pub mod remote;
pub mod sandbox;

pub use casstore::{CheckoutMode, ObjectId, ObjectKind, Repo};
pub use deploy::Deployment;
pub use error::{Error, Result};
pub use paths::Paths;
pub use refmodel::{CommandSource, CommandSpec, Manifest, RuntimeRef};
