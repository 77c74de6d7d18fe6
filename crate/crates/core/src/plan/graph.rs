//! Dependency resolution between plan steps.

use std::collections::BTreeSet;

use super::{Plan, PlanError};

/// Producer→consumer edges of a plan. Edges always point forward in step
/// order, so the graph is acyclic by construction.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DependencyGraph {
    step_count: usize,
    edges: BTreeSet<(usize, usize)>,
    material_edges: BTreeSet<(String, usize)>,
}

impl DependencyGraph {
    pub fn step_count(&self) -> usize {
        self.step_count
    }

    pub fn edges(&self) -> &BTreeSet<(usize, usize)> {
        &self.edges
    }

    pub fn material_edges(&self) -> &BTreeSet<(String, usize)> {
        &self.material_edges
    }

    /// Steps whose outputs `step` consumes directly.
    pub fn dependencies(&self, step: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges
            .iter()
            .filter(move |(_, consumer)| *consumer == step)
            .map(|(producer, _)| *producer)
    }

    pub fn consumers(&self, step: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges
            .range((step, 0)..(step + 1, 0))
            .map(|(_, consumer)| *consumer)
    }

    /// Transitive dependencies of `step`, excluding `step` itself.
    pub fn ancestors(&self, step: usize) -> BTreeSet<usize> {
        let mut seen = BTreeSet::new();
        let mut stack: Vec<usize> = self.dependencies(step).collect();
        while let Some(s) = stack.pop() {
            if seen.insert(s) {
                stack.extend(self.dependencies(s));
            }
        }
        seen
    }

    /// Longest-path depth of each step; steps of equal depth are independent.
    pub fn levels(&self) -> Vec<usize> {
        let mut level = vec![0usize; self.step_count];
        for &(producer, consumer) in &self.edges {
            // Edges are sorted by producer and always point forward, so the
            // producer's level is final when its edges are visited.
            level[consumer] = level[consumer].max(level[producer] + 1);
        }
        level
    }
}

/// Resolves every reference to its nearest earlier producer.
pub fn build_dependency_graph(plan: &Plan) -> Result<DependencyGraph, PlanError> {
    let mut graph = DependencyGraph {
        step_count: plan.steps.len(),
        ..Default::default()
    };
    for (i, step) in plan.steps.iter().enumerate() {
        for r in step.references() {
            let name = r.filename();
            let earlier = plan.steps[..i]
                .iter()
                .rposition(|s| s.output.filename() == name);
            if let Some(producer) = earlier {
                graph.edges.insert((producer, i));
            } else if plan.is_material(name) {
                graph.material_edges.insert((name.to_string(), i));
            } else if let Some(producer) = plan.steps[i..]
                .iter()
                .position(|s| s.output.filename() == name)
            {
                return Err(PlanError::ForwardReference {
                    step: i,
                    filename: name.to_string(),
                    producer: producer + i,
                });
            } else {
                return Err(PlanError::UnresolvedReference {
                    step: i,
                    filename: name.to_string(),
                });
            }
        }
    }
    Ok(graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::parse_plan;
    use serde_json::json;

    fn step(index: usize, tool: &str, args: serde_json::Value, output: &str) -> serde_json::Value {
        json!({"index": index, "tool": tool, "args": args, "output": output})
    }

    #[test]
    fn single_chain() {
        let plan = parse_plan(&json!({
            "query": "q", "task_type": "IA-V", "materials": [],
            "steps": [
                step(0, "text_txt_to_image_png", json!({"prompt": {"literal": "x"}}), "a.png"),
                step(1, "image_png_to_video_mp4", json!({"images": [{"ref": "a.png"}]}), "b.mp4"),
            ]
        }))
        .unwrap();
        let g = build_dependency_graph(&plan).unwrap();
        assert_eq!(g.edges().iter().copied().collect::<Vec<_>>(), vec![(0, 1)]);
    }

    #[test]
    fn forward_reference_is_distinct() {
        let plan = parse_plan(&json!({
            "query": "q", "task_type": "IA-V", "materials": [],
            "steps": [
                step(0, "image_png_to_video_mp4", json!({"images": [{"ref": "later.png"}]}), "b.mp4"),
                step(1, "text_txt_to_image_png", json!({"prompt": {"literal": "x"}}), "later.png"),
            ]
        }))
        .unwrap();
        assert_eq!(
            build_dependency_graph(&plan),
            Err(PlanError::ForwardReference {
                step: 0,
                filename: "later.png".into(),
                producer: 1
            })
        );
    }

    #[test]
    fn unresolved_reference() {
        let plan = parse_plan(&json!({
            "query": "q", "task_type": "IA-V", "materials": [],
            "steps": [step(0, "image_png_to_video_mp4", json!({"images": {"ref": "ghost.png"}}), "b.mp4")]
        }))
        .unwrap();
        assert!(matches!(
            build_dependency_graph(&plan),
            Err(PlanError::UnresolvedReference { step: 0, .. })
        ));
    }

    /// Oracle: scan every (producer, consumer) pair by brute force.
    fn brute_force_edges(plan: &Plan) -> BTreeSet<(usize, usize)> {
        let mut edges = BTreeSet::new();
        for (c, consumer) in plan.steps.iter().enumerate() {
            for r in consumer.references() {
                let mut best = None;
                for (p, producer) in plan.steps.iter().enumerate() {
                    if p < c && producer.output.filename() == r.filename() {
                        best = Some(p);
                    }
                }
                if let Some(p) = best {
                    edges.insert((p, c));
                }
            }
        }
        edges
    }

    #[test]
    fn diamond() {
        let plan = parse_plan(&json!({
            "query": "q", "task_type": "MI-V", "materials": ["m.png"],
            "steps": [
                step(0, "image_png_to_image_png", json!({"image": {"ref": "m.png"}, "instruction": {"literal": "x"}}), "base.png"),
                step(1, "image_png_to_image_png", json!({"image": {"ref": "base.png"}, "instruction": {"literal": "left"}}), "l.png"),
                step(2, "image_png_to_image_png", json!({"image": {"ref": "base.png"}, "instruction": {"literal": "right"}}), "r.png"),
                step(3, "image_png_to_video_mp4", json!({"images": [{"ref": "l.png"}, {"ref": "r.png"}]}), "out.mp4"),
            ]
        }))
        .unwrap();
        let g = build_dependency_graph(&plan).unwrap();
        let expected: BTreeSet<_> = [(0, 1), (0, 2), (1, 3), (2, 3)].into_iter().collect();
        assert_eq!(g.edges(), &expected);
        assert_eq!(g.edges(), &brute_force_edges(&plan));
        assert_eq!(g.material_edges().len(), 1);
        assert_eq!(g.levels(), vec![0, 1, 1, 2]);
        assert_eq!(g.ancestors(3), [0, 1, 2].into_iter().collect());
        assert_eq!(g.consumers(0).collect::<Vec<_>>(), vec![1, 2]);
    }
}
