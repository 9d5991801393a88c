//! Knowledge-component tooling for multiple-choice question banks.
//!
//! The crate covers four stages:
//!
//! * [`corpus`]: the question-bank model, paired-benchmark validation and
//!   prompt-ready rendering.
//! * [`gateway`]: chat-completion access with retries, transcript
//!   record/replay, scripted providers and token/cost accounting.
//! * [`generation`]: the simulated-expert and simulated-textbook prompt
//!   chains, with parsers for their replies and label shortening.
//! * [`evaluation`]: match judges, match metrics, preference aggregation
//!   and the hypothesis tests used to compare them.
//! * [`ontology`]: iterative partitioning of a question pool into a KC
//!   ontology, scored by grouping accuracy and refinement.

pub mod corpus;
pub mod evaluation;
pub mod gateway;
pub mod generation;
pub mod ontology;
pub mod scripts;
pub mod template;
pub mod text;
