//! Record schema, validation, dataset files, and pairwise example
//! construction.

mod examples;
mod io;
mod records;
mod schema;

pub use examples::{build_examples, split_dataset};
pub use io::{load_dataset, load_dataset_checked, store_dataset, Dataset, Split};
pub use records::{
    validate_record, CompanyRecord, MatchExample, RecordRef, SolutionRecord, ValidationIssue,
    ValidationReport,
};
pub use schema::{load_schema, store_schema, CategoricalField, FieldSchema, Side};
