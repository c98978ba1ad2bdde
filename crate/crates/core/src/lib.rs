pub mod access_control;
pub mod corpus;
pub mod demo;
pub mod district;
pub mod entity_register;
pub mod federation;
pub mod ids;
pub mod ingestion;
pub mod metamodel;
pub mod query_engine;
pub mod service;
