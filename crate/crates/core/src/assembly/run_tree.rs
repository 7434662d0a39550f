use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::record::{Header, MedLogRecord};

/// Events of one run linked by `parent_event_id`. Always a forest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunTree {
    pub run_id: String,
    pub nodes: BTreeSet<String>,
    /// (parent_event_id, event_id) pairs.
    pub edges: BTreeSet<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RunTreeError {
    #[error("cycle in run {run_id:?} through events {events:?}")]
    Cycle { run_id: String, events: Vec<String> },
    #[error("record {event_id:?} belongs to run {actual:?}, not {expected:?}")]
    ForeignRecord {
        event_id: String,
        expected: String,
        actual: Option<String>,
    },
}

impl RunTree {
    /// Nodes without a parent inside the run.
    pub fn roots(&self) -> Vec<&str> {
        let children: BTreeSet<&str> = self.edges.iter().map(|(_, c)| c.as_str()).collect();
        self.nodes
            .iter()
            .map(String::as_str)
            .filter(|n| !children.contains(n))
            .collect()
    }

    pub fn children(&self, event_id: &str) -> Vec<&str> {
        self.edges
            .iter()
            .filter(|(p, _)| p == event_id)
            .map(|(_, c)| c.as_str())
            .collect()
    }
}

/// Link records of `run_id` through their parent pointers. Parents outside
/// the collection make their children roots.
pub fn build_run_tree<'a, I>(run_id: &str, records: I) -> Result<RunTree, RunTreeError>
where
    I: IntoIterator<Item = &'a MedLogRecord>,
{
    build_run_tree_from_headers(run_id, records.into_iter().map(|r| (r.event_id.as_str(), &r.header)))
}

/// Same as [`build_run_tree`], from (event_id, header) pairs. Lets
/// summarized records take part.
pub fn build_run_tree_from_headers<'a, I>(run_id: &str, headers: I) -> Result<RunTree, RunTreeError>
where
    I: IntoIterator<Item = (&'a str, &'a Header)>,
{
    let mut parent_of: BTreeMap<String, Option<String>> = BTreeMap::new();
    for (event_id, header) in headers {
        if header.run_id.as_deref() != Some(run_id) {
            return Err(RunTreeError::ForeignRecord {
                event_id: event_id.to_owned(),
                expected: run_id.to_owned(),
                actual: header.run_id.clone(),
            });
        }
        parent_of.insert(event_id.to_owned(), header.parent_event_id.clone());
    }

    let mut edges = BTreeSet::new();
    for (child, parent) in &parent_of {
        if let Some(p) = parent {
            if parent_of.contains_key(p) {
                edges.insert((p.clone(), child.clone()));
            }
        }
    }

    // Each node has at most one parent, so a cycle shows up as a revisit
    // while walking parent pointers.
    let mut cleared: BTreeSet<&str> = BTreeSet::new();
    for start in parent_of.keys() {
        let mut path: Vec<&str> = Vec::new();
        let mut on_path: BTreeSet<&str> = BTreeSet::new();
        let mut cur = Some(start.as_str());
        while let Some(n) = cur {
            if cleared.contains(n) {
                break;
            }
            if !on_path.insert(n) {
                let pos = path.iter().position(|x| *x == n).expect("on path");
                let mut events: Vec<String> = path[pos..].iter().map(|s| s.to_string()).collect();
                events.sort();
                return Err(RunTreeError::Cycle {
                    run_id: run_id.to_owned(),
                    events,
                });
            }
            path.push(n);
            cur = parent_of
                .get(n)
                .and_then(|p| p.as_deref())
                .filter(|p| parent_of.contains_key(*p));
        }
        cleared.extend(path);
    }

    Ok(RunTree {
        run_id: run_id.to_owned(),
        nodes: parent_of.into_keys().collect(),
        edges,
    })
}
