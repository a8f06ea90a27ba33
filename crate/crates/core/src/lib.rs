//! Core of the self-dialogue collection platform: domain types, the LLM
//! gateway, dialogue-act control, guidance, preference extraction and memory,
//! task orchestration, synthetic dialogue generation and dataset export.

pub mod acts;
pub mod dataset;
pub mod domains;
pub mod extraction;
pub mod guidance;
pub mod llm;
pub mod memory;
pub mod model;
pub mod orchestrator;
pub mod synthetic;
pub mod template;
