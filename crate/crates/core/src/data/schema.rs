use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoricalField {
    pub name: String,
    pub cardinality: usize,
}

/// Which entity a text field belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Solution,
    Company,
}

/// Field layout shared by records, sequence assembly and the encoders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldSchema {
    pub desc_fields_solution: Vec<String>,
    pub desc_fields_company: Vec<String>,
    pub attr_fields_solution: Vec<String>,
    pub attr_fields_company: Vec<String>,
    pub categorical_fields: Vec<CategoricalField>,
    pub numeric_fields: Vec<String>,
}

impl FieldSchema {
    /// The solution/company layout used by the synthetic corpus: names,
    /// introductions and business scope as descriptions; industry levels,
    /// scenarios and copyrights as attribute tags; scale as categorical and
    /// numeric features.
    pub fn standard() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        FieldSchema {
            desc_fields_solution: s(&["solution_name", "solution_introduction"]),
            desc_fields_company: s(&["company_name", "company_introduction", "business_scope"]),
            attr_fields_solution: s(&["solution_industry", "solution_scenario"]),
            attr_fields_company: s(&["first_level_industry", "second_level_industry", "copyrights"]),
            categorical_fields: vec![
                CategoricalField {
                    name: "enterprise_scale".into(),
                    cardinality: 3,
                },
                CategoricalField {
                    name: "is_listed".into(),
                    cardinality: 2,
                },
            ],
            numeric_fields: s(&["registered_capital", "employee_count", "app_count"]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let groups: [(&str, Vec<&String>); 6] = [
            ("desc_fields_solution", self.desc_fields_solution.iter().collect()),
            ("desc_fields_company", self.desc_fields_company.iter().collect()),
            ("attr_fields_solution", self.attr_fields_solution.iter().collect()),
            ("attr_fields_company", self.attr_fields_company.iter().collect()),
            (
                "categorical_fields",
                self.categorical_fields.iter().map(|c| &c.name).collect(),
            ),
            ("numeric_fields", self.numeric_fields.iter().collect()),
        ];
        for (group, names) in &groups {
            if names.is_empty() {
                return Err(Error::invalid(format!("schema group `{group}` is empty")));
            }
            let mut seen = HashSet::new();
            for n in names {
                if !seen.insert(n.as_str()) {
                    return Err(Error::invalid(format!(
                        "schema group `{group}` repeats field `{n}`"
                    )));
                }
            }
        }
        for c in &self.categorical_fields {
            if c.cardinality < 2 {
                return Err(Error::invalid(format!(
                    "categorical field `{}` has cardinality {} < 2",
                    c.name, c.cardinality
                )));
            }
        }
        Ok(())
    }

    pub fn desc_fields(&self, side: Side) -> &[String] {
        match side {
            Side::Solution => &self.desc_fields_solution,
            Side::Company => &self.desc_fields_company,
        }
    }

    pub fn attr_fields(&self, side: Side) -> &[String] {
        match side {
            Side::Solution => &self.attr_fields_solution,
            Side::Company => &self.attr_fields_company,
        }
    }

    pub fn num_desc_fields(&self) -> usize {
        self.desc_fields_solution.len() + self.desc_fields_company.len()
    }

    pub fn num_attr_fields(&self) -> usize {
        self.attr_fields_solution.len() + self.attr_fields_company.len()
    }

    pub fn num_text_fields(&self) -> usize {
        self.num_desc_fields() + self.num_attr_fields()
    }

    pub fn cardinality(&self, name: &str) -> Option<usize> {
        self.categorical_fields
            .iter()
            .find(|c| c.name == name)
            .map(|c| c.cardinality)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum SchemaLine {
    TextField { group: String, name: String },
    Categorical { name: String, cardinality: usize },
    Numeric { name: String },
}

const TEXT_GROUPS: [&str; 4] = [
    "desc_solution",
    "desc_company",
    "attr_solution",
    "attr_company",
];

pub fn store_schema(schema: &FieldSchema, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    let groups = [
        &schema.desc_fields_solution,
        &schema.desc_fields_company,
        &schema.attr_fields_solution,
        &schema.attr_fields_company,
    ];
    let mut lines = Vec::new();
    for (group, names) in TEXT_GROUPS.iter().zip(groups) {
        for n in names {
            lines.push(SchemaLine::TextField {
                group: group.to_string(),
                name: n.clone(),
            });
        }
    }
    for c in &schema.categorical_fields {
        lines.push(SchemaLine::Categorical {
            name: c.name.clone(),
            cardinality: c.cardinality,
        });
    }
    for n in &schema.numeric_fields {
        lines.push(SchemaLine::Numeric { name: n.clone() });
    }
    for l in lines {
        serde_json::to_writer(&mut out, &l).expect("schema line serialises");
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn load_schema(path: &Path) -> Result<FieldSchema> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut schema = FieldSchema {
        desc_fields_solution: vec![],
        desc_fields_company: vec![],
        attr_fields_solution: vec![],
        attr_fields_company: vec![],
        categorical_fields: vec![],
        numeric_fields: vec![],
    };
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let parsed: SchemaLine =
            serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        match parsed {
            SchemaLine::TextField { group, name } => match group.as_str() {
                "desc_solution" => schema.desc_fields_solution.push(name),
                "desc_company" => schema.desc_fields_company.push(name),
                "attr_solution" => schema.attr_fields_solution.push(name),
                "attr_company" => schema.attr_fields_company.push(name),
                other => return Err(parse_err(format!("unknown text group `{other}`"))),
            },
            SchemaLine::Categorical { name, cardinality } => schema
                .categorical_fields
                .push(CategoricalField { name, cardinality }),
            SchemaLine::Numeric { name } => schema.numeric_fields.push(name),
        }
    }
    schema.validate()?;
    Ok(schema)
}
