//! Deterministic JSON export of an induced ontology.

use serde::{Deserialize, Serialize};

use super::{score_grouping, InductionResult, OntologyError, OntologyNode};
use crate::corpus::PairedBenchmark;
use crate::gateway::Usage;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportNode {
    pub objective: Option<String>,
    pub question_ids: Vec<String>,
    pub children: Vec<ExportNode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelScore {
    pub level: usize,
    pub group_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refinement: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OntologyExport {
    pub converged: bool,
    pub iterations: usize,
    pub classification_repairs: usize,
    pub tree: ExportNode,
    pub levels: Vec<LevelScore>,
    pub usage: Usage,
}

impl OntologyExport {
    /// Pretty JSON with a trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("export serializes");
        s.push('\n');
        s
    }
}

fn export_node(node: &OntologyNode) -> ExportNode {
    let mut question_ids = node.group.question_ids.clone();
    question_ids.sort();
    let mut children: Vec<ExportNode> = node.children.iter().map(export_node).collect();
    children.sort_by(|a, b| a.question_ids.first().cmp(&b.question_ids.first()));
    ExportNode {
        objective: node.group.objective.as_ref().map(|o| o.label.clone()),
        question_ids,
        children,
    }
}

/// Converts an induction result into its export document. Levels are scored
/// when a paired benchmark is given. Children are ordered by their smallest
/// question id.
pub fn export_tree(result: &InductionResult, bench: Option<&PairedBenchmark>) -> Result<OntologyExport, OntologyError> {
    let levels = result
        .levels
        .iter()
        .map(|g| {
            let score = bench.map(|b| score_grouping(g, b)).transpose()?;
            Ok(LevelScore {
                level: g.level,
                group_count: g.groups.len(),
                accuracy: score.map(|s| s.accuracy),
                refinement: score.map(|s| s.refinement),
            })
        })
        .collect::<Result<Vec<_>, OntologyError>>()?;
    Ok(OntologyExport {
        converged: result.converged,
        iterations: result.iterations,
        classification_repairs: result.classification_repairs,
        tree: export_node(&result.tree),
        levels,
        usage: result.usage,
    })
}
