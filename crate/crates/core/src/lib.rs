pub mod cdfg;
pub mod dataset;
pub mod designspace;
pub mod doc;
pub mod ecognn;
pub mod llm4dse;
pub mod mpm;
pub mod oracle;
pub mod pareto;
pub mod tensor;
pub mod textembed;
