//! Re-export a `report.json` as a flat CSV table or as canonical JSON.

use std::path::Path;

use crate::{CliError, CliResult};

/// Output format of the `export` subcommand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ExportFormat {
    Csv,
    Json,
}

/// Convert a report file; returns the rendered text (the caller decides
/// whether it goes to stdout or to a file).
pub fn render(input: &Path, format: ExportFormat) -> CliResult<String> {
    let text = std::fs::read_to_string(input).map_err(|e| {
        CliError::Config(format!("cannot read report {}: {e}", input.display()))
    })?;
    let doc: serde_json::Value = serde_json::from_str(&text).map_err(|e| {
        CliError::Config(format!("{} is not a valid report: {e}", input.display()))
    })?;
    let checks = doc
        .get("checks")
        .and_then(|c| c.as_array())
        .ok_or_else(|| {
            CliError::Config(format!(
                "{} is not a valid report: missing `checks` array",
                input.display()
            ))
        })?;
    match format {
        ExportFormat::Json => Ok(format!(
            "{}\n",
            serde_json::to_string_pretty(&doc).expect("value serializes")
        )),
        ExportFormat::Csv => {
            let mut out = String::from("name,anchor,lhs,rhs,abs_gap,rel_gap,tolerance,gap_kind,pass\n");
            for check in checks {
                let field = |key: &str| -> String {
                    match check.get(key) {
                        Some(serde_json::Value::String(s)) => csv_quote(s),
                        Some(v) => v.to_string(),
                        None => String::new(),
                    }
                };
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{}\n",
                    field("name"),
                    field("anchor"),
                    field("lhs"),
                    field("rhs"),
                    field("abs_gap"),
                    field("rel_gap"),
                    field("tolerance"),
                    field("gap_kind"),
                    field("pass"),
                ));
            }
            Ok(out)
        }
    }
}

/// RFC 4180 quoting: wrap in double quotes, double any embedded quote.
fn csv_quote(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}
