//! Guide chapters compiled as documentation so their snippets run as doc-tests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/kinematics.md")]
pub mod kinematics {}

#[doc = include_str!("../../../book/src/powertrain.md")]
pub mod powertrain {}

#[doc = include_str!("../../../book/src/slip.md")]
pub mod slip {}

#[doc = include_str!("../../../book/src/protocol.md")]
pub mod protocol {}

#[doc = include_str!("../../../book/src/simulator.md")]
pub mod simulator {}

#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
