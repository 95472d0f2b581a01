//! Compiles and runs the guide's code samples as doc-tests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/fields.md")]
pub mod fields {}

#[doc = include_str!("../../../book/src/specimens.md")]
pub mod specimens {}

#[doc = include_str!("../../../book/src/acquisition.md")]
pub mod acquisition {}

#[doc = include_str!("../../../book/src/tie.md")]
pub mod tie {}

#[doc = include_str!("../../../book/src/flow-model.md")]
pub mod flow_model {}

#[doc = include_str!("../../../book/src/reconstruction.md")]
pub mod reconstruction {}

#[doc = include_str!("../../../book/src/files.md")]
pub mod files {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
