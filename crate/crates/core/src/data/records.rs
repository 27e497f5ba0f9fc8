use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::schema::{FieldSchema, Side};

/// A solution: description texts and attribute tags keyed by field name.
/// Absent keys are missing fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolutionRecord {
    pub id: String,
    #[serde(default)]
    pub desc: BTreeMap<String, String>,
    #[serde(default)]
    pub attr: BTreeMap<String, Vec<String>>,
}

/// A company: texts as for solutions plus categorical and numeric scale
/// features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompanyRecord {
    pub id: String,
    #[serde(default)]
    pub desc: BTreeMap<String, String>,
    #[serde(default)]
    pub attr: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub categorical: BTreeMap<String, usize>,
    #[serde(default)]
    pub numeric: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MatchExample {
    pub solution_id: String,
    pub company_id: String,
    pub label: u8,
}

impl MatchExample {
    pub fn new(solution_id: impl Into<String>, company_id: impl Into<String>, label: u8) -> Self {
        MatchExample {
            solution_id: solution_id.into(),
            company_id: company_id.into(),
            label,
        }
    }

    pub fn is_positive(&self) -> bool {
        self.label == 1
    }
}

/// Borrowed view over either record type.
#[derive(Debug, Clone, Copy)]
pub enum RecordRef<'a> {
    Solution(&'a SolutionRecord),
    Company(&'a CompanyRecord),
}

impl<'a> RecordRef<'a> {
    pub fn side(&self) -> Side {
        match self {
            RecordRef::Solution(_) => Side::Solution,
            RecordRef::Company(_) => Side::Company,
        }
    }

    pub fn id(&self) -> &'a str {
        match self {
            RecordRef::Solution(s) => &s.id,
            RecordRef::Company(c) => &c.id,
        }
    }

    pub fn desc(&self) -> &'a BTreeMap<String, String> {
        match self {
            RecordRef::Solution(s) => &s.desc,
            RecordRef::Company(c) => &c.desc,
        }
    }

    pub fn attr(&self) -> &'a BTreeMap<String, Vec<String>> {
        match self {
            RecordRef::Solution(s) => &s.attr,
            RecordRef::Company(c) => &c.attr,
        }
    }
}

impl<'a> From<&'a SolutionRecord> for RecordRef<'a> {
    fn from(r: &'a SolutionRecord) -> Self {
        RecordRef::Solution(r)
    }
}

impl<'a> From<&'a CompanyRecord> for RecordRef<'a> {
    fn from(r: &'a CompanyRecord) -> Self {
        RecordRef::Company(r)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ValidationIssue {
    EmptyId,
    OutOfSchema { group: &'static str, field: String },
    CategoryOutOfRange { field: String, index: usize, cardinality: usize },
    NonFiniteNumeric { field: String },
    MissingScaleFeature { field: String },
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValidationIssue::EmptyId => write!(f, "empty id"),
            ValidationIssue::OutOfSchema { group, field } => {
                write!(f, "field `{field}` is not declared in {group}")
            }
            ValidationIssue::CategoryOutOfRange {
                field,
                index,
                cardinality,
            } => write!(
                f,
                "category {index} of `{field}` outside [0, {cardinality})"
            ),
            ValidationIssue::NonFiniteNumeric { field } => {
                write!(f, "numeric field `{field}` is not finite")
            }
            ValidationIssue::MissingScaleFeature { field } => {
                write!(f, "scale feature `{field}` is missing")
            }
        }
    }
}

/// Missing text fields are allowed and listed; everything else is an error.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub missing: Vec<String>,
    pub errors: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.missing.is_empty() && self.errors.is_empty()
    }

    pub fn is_valid(&self) -> bool {
        self.errors.is_empty()
    }
}

pub fn validate_record<'a>(record: impl Into<RecordRef<'a>>, schema: &FieldSchema) -> ValidationReport {
    let record = record.into();
    let side = record.side();
    let mut report = ValidationReport::default();
    if record.id().is_empty() {
        report.errors.push(ValidationIssue::EmptyId);
    }
    let (desc_group, attr_group) = match side {
        Side::Solution => ("desc_fields_solution", "attr_fields_solution"),
        Side::Company => ("desc_fields_company", "attr_fields_company"),
    };
    let desc_fields = schema.desc_fields(side);
    let attr_fields = schema.attr_fields(side);
    for name in record.desc().keys() {
        if !desc_fields.contains(name) {
            report.errors.push(ValidationIssue::OutOfSchema {
                group: desc_group,
                field: name.clone(),
            });
        }
    }
    for name in record.attr().keys() {
        if !attr_fields.contains(name) {
            report.errors.push(ValidationIssue::OutOfSchema {
                group: attr_group,
                field: name.clone(),
            });
        }
    }
    for name in desc_fields {
        if !record.desc().contains_key(name) {
            report.missing.push(name.clone());
        }
    }
    for name in attr_fields {
        if !record.attr().contains_key(name) {
            report.missing.push(name.clone());
        }
    }
    if let RecordRef::Company(c) = record {
        for (name, &index) in &c.categorical {
            match schema.cardinality(name) {
                None => report.errors.push(ValidationIssue::OutOfSchema {
                    group: "categorical_fields",
                    field: name.clone(),
                }),
                Some(card) if index >= card => {
                    report.errors.push(ValidationIssue::CategoryOutOfRange {
                        field: name.clone(),
                        index,
                        cardinality: card,
                    })
                }
                Some(_) => {}
            }
        }
        for (name, v) in &c.numeric {
            if !schema.numeric_fields.contains(name) {
                report.errors.push(ValidationIssue::OutOfSchema {
                    group: "numeric_fields",
                    field: name.clone(),
                });
            } else if !v.is_finite() {
                report.errors.push(ValidationIssue::NonFiniteNumeric {
                    field: name.clone(),
                });
            }
        }
        for cat in &schema.categorical_fields {
            if !c.categorical.contains_key(&cat.name) {
                report.errors.push(ValidationIssue::MissingScaleFeature {
                    field: cat.name.clone(),
                });
            }
        }
        for name in &schema.numeric_fields {
            if !c.numeric.contains_key(name) {
                report.errors.push(ValidationIssue::MissingScaleFeature {
                    field: name.clone(),
                });
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_company() -> CompanyRecord {
        let schema = FieldSchema::standard();
        CompanyRecord {
            id: "C1".into(),
            desc: schema
                .desc_fields_company
                .iter()
                .map(|f| (f.clone(), "retail store".to_string()))
                .collect(),
            attr: schema
                .attr_fields_company
                .iter()
                .map(|f| (f.clone(), vec!["retail".to_string()]))
                .collect(),
            categorical: [("enterprise_scale".to_string(), 1), ("is_listed".to_string(), 0)]
                .into_iter()
                .collect(),
            numeric: schema.numeric_fields.iter().map(|f| (f.clone(), 3.5)).collect(),
        }
    }

    #[test]
    fn complete_record_has_empty_report() {
        let report = validate_record(&full_company(), &FieldSchema::standard());
        assert!(report.is_clean(), "{report:?}");
    }

    #[test]
    fn absent_industry_is_missing_not_error() {
        let mut c = full_company();
        c.attr.remove("second_level_industry");
        let report = validate_record(&c, &FieldSchema::standard());
        assert_eq!(report.missing, vec!["second_level_industry".to_string()]);
        assert!(report.errors.is_empty());
    }

    #[test]
    fn category_at_cardinality_is_out_of_range() {
        let mut c = full_company();
        c.categorical.insert("enterprise_scale".into(), 3);
        let report = validate_record(&c, &FieldSchema::standard());
        assert_eq!(
            report.errors,
            vec![ValidationIssue::CategoryOutOfRange {
                field: "enterprise_scale".into(),
                index: 3,
                cardinality: 3
            }]
        );
    }

    #[test]
    fn non_finite_and_unknown_fields_are_errors() {
        let mut c = full_company();
        c.numeric.insert("app_count".into(), f64::NAN);
        c.desc.insert("motto".into(), "x".into());
        let report = validate_record(&c, &FieldSchema::standard());
        assert_eq!(report.errors.len(), 2);
        assert!(report
            .errors
            .contains(&ValidationIssue::NonFiniteNumeric { field: "app_count".into() }));
    }

    #[test]
    fn solution_missing_introduction() {
        let s = SolutionRecord {
            id: "S1".into(),
            desc: [("solution_name".to_string(), "retail suite".to_string())]
                .into_iter()
                .collect(),
            attr: BTreeMap::new(),
        };
        let report = validate_record(&s, &FieldSchema::standard());
        assert!(report.is_valid());
        assert_eq!(report.missing.len(), 3);
    }
}
