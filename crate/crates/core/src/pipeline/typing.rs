//! Port types and the composition checker for stage pipelines.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::Capability;

/// Reserved node name for a pipeline's external inputs.
pub const PIPELINE_NODE: &str = "pipeline";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Text,
    Boxes,
    Masks,
    Tags,
    Caption,
    Annotations,
    EditedImage,
    Mesh,
}

impl Modality {
    /// Whether an output of this kind may be bound to an input of kind `input`.
    ///
    /// Kinds must be equal, except that tags and captions are accepted where
    /// text phrases are expected (they are converted to phrase lists).
    pub fn feeds(self, input: Modality) -> bool {
        self == input || matches!((self, input), (Modality::Tags, Modality::Text) | (Modality::Caption, Modality::Text))
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("modality serializes");
        f.write_str(s.as_str().expect("modality is a string"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Port {
    pub name: String,
    pub modality: Modality,
}

impl Port {
    pub fn new(name: &str, modality: Modality) -> Self {
        Self {
            name: name.to_string(),
            modality,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: String,
    pub capability: Capability,
    pub inputs: Vec<Port>,
    pub outputs: Vec<Port>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub config: BTreeMap<String, serde_json::Value>,
}

impl StageSpec {
    /// A stage with the standard ports of `capability`.
    pub fn for_capability(name: &str, capability: Capability) -> Self {
        use Modality::*;
        let (inputs, outputs) = match capability {
            Capability::Detector => (vec![Port::new("image", Image), Port::new("text", Text)], vec![Port::new("boxes", Boxes)]),
            Capability::Segmenter => (vec![Port::new("image", Image), Port::new("boxes", Boxes)], vec![Port::new("masks", Masks)]),
            Capability::Tagger => (vec![Port::new("image", Image)], vec![Port::new("tags", Tags)]),
            Capability::Captioner => (vec![Port::new("image", Image)], vec![Port::new("caption", Caption)]),
            Capability::Inpainter => (
                vec![Port::new("image", Image), Port::new("masks", Masks), Port::new("prompt", Text)],
                vec![Port::new("edited", EditedImage)],
            ),
            Capability::MeshRecoverer => (vec![Port::new("image", Image), Port::new("boxes", Boxes)], vec![Port::new("mesh", Mesh)]),
        };
        Self {
            name: name.to_string(),
            capability,
            inputs,
            outputs,
            config: BTreeMap::new(),
        }
    }
}

/// `node.port`, where node is a stage name or [`PIPELINE_NODE`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PortRef {
    pub node: String,
    pub port: String,
}

impl PortRef {
    pub fn new(node: &str, port: &str) -> Self {
        Self {
            node: node.to_string(),
            port: port.to_string(),
        }
    }
}

impl fmt::Display for PortRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.node, self.port)
    }
}

impl TryFrom<String> for PortRef {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        match s.split_once('.') {
            Some((n, p)) if !n.is_empty() && !p.is_empty() => Ok(PortRef::new(n, p)),
            _ => Err(format!("port reference '{s}' must look like 'node.port'")),
        }
    }
}

impl From<PortRef> for String {
    fn from(p: PortRef) -> Self {
        p.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Binding {
    pub from: PortRef,
    pub to: PortRef,
}

impl Binding {
    pub fn new(from: &str, to: &str) -> Self {
        Self {
            from: PortRef::try_from(from.to_string()).expect("valid port reference"),
            to: PortRef::try_from(to.to_string()).expect("valid port reference"),
        }
    }

    pub fn label(&self) -> String {
        format!("{} <- {}", self.to, self.from)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub name: String,
    /// External inputs, referenced as `pipeline.<name>`.
    pub inputs: Vec<Port>,
    pub stages: Vec<StageSpec>,
    pub bindings: Vec<Binding>,
}

/// A checked pipeline: stages in executable order and its overall signature.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TypedPlan {
    pub order: Vec<String>,
    pub net_inputs: Vec<Modality>,
    pub net_outputs: Vec<Modality>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PipelineTypeError {
    #[error("modality mismatch in binding '{binding}': {from} cannot feed {to}")]
    ModalityMismatch { binding: String, from: Modality, to: Modality },
    #[error("unbound input: {port}")]
    UnboundInput { port: String },
    #[error("input {port} is bound more than once")]
    DuplicateBinding { port: String },
    #[error("binding '{binding}' refers to unknown port {port}")]
    UnknownPort { binding: String, port: String },
    #[error("invalid stage '{stage}': {reason}")]
    InvalidStage { stage: String, reason: String },
    #[error("cycle through stages {stages:?} (binding '{binding}')")]
    Cycle { stages: Vec<String>, binding: String },
}

impl PipelineTypeError {
    /// The binding or port the error is about.
    pub fn offending(&self) -> &str {
        match self {
            PipelineTypeError::ModalityMismatch { binding, .. }
            | PipelineTypeError::UnknownPort { binding, .. }
            | PipelineTypeError::Cycle { binding, .. } => binding,
            PipelineTypeError::UnboundInput { port } | PipelineTypeError::DuplicateBinding { port } => port,
            PipelineTypeError::InvalidStage { stage, .. } => stage,
        }
    }
}

pub fn validate_pipeline(spec: &PipelineSpec) -> Result<TypedPlan, PipelineTypeError> {
    if spec.stages.is_empty() {
        return Err(PipelineTypeError::UnboundInput {
            port: format!("pipeline '{}' has no stages to consume its inputs", spec.name),
        });
    }

    let mut stage_index = BTreeMap::new();
    for (i, s) in spec.stages.iter().enumerate() {
        let invalid = |reason: &str| PipelineTypeError::InvalidStage {
            stage: s.name.clone(),
            reason: reason.to_string(),
        };
        if s.name == PIPELINE_NODE || s.name.is_empty() || s.name.contains('.') {
            return Err(invalid("reserved or malformed stage name"));
        }
        if s.inputs.is_empty() || s.outputs.is_empty() {
            return Err(invalid("stages need at least one input and one output"));
        }
        if stage_index.insert(s.name.as_str(), i).is_some() {
            return Err(invalid("duplicate stage name"));
        }
    }

    let source_modality = |r: &PortRef| -> Option<Modality> {
        let ports = if r.node == PIPELINE_NODE {
            &spec.inputs
        } else {
            &spec.stages[*stage_index.get(r.node.as_str())?].outputs
        };
        ports.iter().find(|p| p.name == r.port).map(|p| p.modality)
    };
    let target_modality = |r: &PortRef| -> Option<Modality> {
        let stage = &spec.stages[*stage_index.get(r.node.as_str())?];
        stage.inputs.iter().find(|p| p.name == r.port).map(|p| p.modality)
    };

    let mut bound: BTreeMap<PortRef, &Binding> = BTreeMap::new();
    for b in &spec.bindings {
        let from = source_modality(&b.from).ok_or_else(|| PipelineTypeError::UnknownPort {
            binding: b.label(),
            port: b.from.to_string(),
        })?;
        let to = target_modality(&b.to).ok_or_else(|| PipelineTypeError::UnknownPort {
            binding: b.label(),
            port: b.to.to_string(),
        })?;
        if !from.feeds(to) {
            return Err(PipelineTypeError::ModalityMismatch {
                binding: b.label(),
                from,
                to,
            });
        }
        if bound.insert(b.to.clone(), b).is_some() {
            return Err(PipelineTypeError::DuplicateBinding { port: b.to.to_string() });
        }
    }

    for s in &spec.stages {
        for p in &s.inputs {
            let r = PortRef::new(&s.name, &p.name);
            if !bound.contains_key(&r) {
                return Err(PipelineTypeError::UnboundInput { port: r.to_string() });
            }
        }
    }

    // Kahn's algorithm, preferring declaration order among ready stages.
    let n = spec.stages.len();
    let mut deps: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for b in bound.values() {
        if b.from.node != PIPELINE_NODE {
            deps[stage_index[b.to.node.as_str()]].insert(stage_index[b.from.node.as_str()]);
        }
    }
    let mut done = vec![false; n];
    let mut order = Vec::with_capacity(n);
    while order.len() < n {
        let ready = (0..n).find(|&i| !done[i] && deps[i].iter().all(|&d| done[d]));
        match ready {
            Some(i) => {
                done[i] = true;
                order.push(spec.stages[i].name.clone());
            }
            None => {
                let stuck: Vec<String> = (0..n).filter(|&i| !done[i]).map(|i| spec.stages[i].name.clone()).collect();
                let binding = bound
                    .values()
                    .find(|b| stuck.contains(&b.from.node) && stuck.contains(&b.to.node))
                    .map(|b| b.label())
                    .unwrap_or_default();
                return Err(PipelineTypeError::Cycle { stages: stuck, binding });
            }
        }
    }

    let used_inputs: BTreeSet<&str> = bound
        .values()
        .filter(|b| b.from.node == PIPELINE_NODE)
        .map(|b| b.from.port.as_str())
        .collect();
    let consumed: BTreeSet<&PortRef> = bound.values().map(|b| &b.from).collect();
    let net_inputs = spec
        .inputs
        .iter()
        .filter(|p| used_inputs.contains(p.name.as_str()))
        .map(|p| p.modality)
        .collect();
    let net_outputs = order
        .iter()
        .flat_map(|name| {
            let s = &spec.stages[stage_index[name.as_str()]];
            s.outputs
                .iter()
                .filter(|p| !consumed.contains(&PortRef::new(&s.name, &p.name)))
                .map(|p| p.modality)
        })
        .collect();

    Ok(TypedPlan {
        order,
        net_inputs,
        net_outputs,
    })
}

/// Every ordered pair of distinct stages `(a, b)` where some output of `a`
/// can feed some input of `b`.
pub fn registry_tasks(stages: &[StageSpec]) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for (i, a) in stages.iter().enumerate() {
        for (j, b) in stages.iter().enumerate() {
            if i == j {
                continue;
            }
            let composable = a
                .outputs
                .iter()
                .any(|o| b.inputs.iter().any(|inp| o.modality.feeds(inp.modality)));
            if composable {
                out.push((a.name.clone(), b.name.clone()));
            }
        }
    }
    out
}

pub const BUILTIN_PIPELINES: [&str; 4] = ["grounded-sam", "auto-annotate", "grounded-inpaint", "promptable-mesh"];

pub fn builtin_pipeline(name: &str) -> Option<PipelineSpec> {
    use Modality::*;
    let det = || StageSpec::for_capability("detector", Capability::Detector);
    let seg = || StageSpec::for_capability("segmenter", Capability::Segmenter);
    let detect_segment = || {
        vec![
            Binding::new("detector.boxes", "segmenter.boxes"),
            Binding::new("pipeline.image", "segmenter.image"),
            Binding::new("pipeline.image", "detector.image"),
        ]
    };
    let spec = match name {
        "grounded-sam" => {
            let mut bindings = detect_segment();
            bindings.push(Binding::new("pipeline.phrases", "detector.text"));
            PipelineSpec {
                name: name.into(),
                inputs: vec![Port::new("image", Image), Port::new("phrases", Text)],
                stages: vec![det(), seg()],
                bindings,
            }
        }
        "auto-annotate" => {
            let mut bindings = detect_segment();
            bindings.push(Binding::new("pipeline.image", "tagger.image"));
            bindings.push(Binding::new("tagger.tags", "detector.text"));
            PipelineSpec {
                name: name.into(),
                inputs: vec![Port::new("image", Image)],
                stages: vec![StageSpec::for_capability("tagger", Capability::Tagger), det(), seg()],
                bindings,
            }
        }
        "grounded-inpaint" => {
            let mut bindings = detect_segment();
            bindings.push(Binding::new("pipeline.targets", "detector.text"));
            bindings.push(Binding::new("pipeline.image", "inpainter.image"));
            bindings.push(Binding::new("segmenter.masks", "inpainter.masks"));
            bindings.push(Binding::new("pipeline.prompt", "inpainter.prompt"));
            PipelineSpec {
                name: name.into(),
                inputs: vec![Port::new("image", Image), Port::new("targets", Text), Port::new("prompt", Text)],
                stages: vec![det(), seg(), StageSpec::for_capability("inpainter", Capability::Inpainter)],
                bindings,
            }
        }
        "promptable-mesh" => {
            let mut bindings = detect_segment();
            bindings.push(Binding::new("pipeline.person", "detector.text"));
            bindings.push(Binding::new("pipeline.image", "mesh.image"));
            bindings.push(Binding::new("detector.boxes", "mesh.boxes"));
            PipelineSpec {
                name: name.into(),
                inputs: vec![Port::new("image", Image), Port::new("person", Text)],
                stages: vec![det(), seg(), StageSpec::for_capability("mesh", Capability::MeshRecoverer)],
                bindings,
            }
        }
        _ => return None,
    };
    Some(spec)
}

/// A corrupted copy of a pipeline and the binding targets the checker must blame.
#[derive(Debug, Clone)]
pub struct BindingMutation {
    pub description: String,
    pub spec: PipelineSpec,
    /// Target ports (`node.port`) of the mutated bindings.
    pub blamed: Vec<String>,
}

/// Enumerates single-binding corruptions of a valid pipeline: dropping a
/// binding, rebinding one input to a source of an incompatible kind, and
/// swapping the sources of two bindings when that breaks typing.
pub fn binding_mutations(spec: &PipelineSpec) -> Vec<BindingMutation> {
    let mut sources: Vec<(PortRef, Modality)> = spec
        .inputs
        .iter()
        .map(|p| (PortRef::new(PIPELINE_NODE, &p.name), p.modality))
        .collect();
    for s in &spec.stages {
        for p in &s.outputs {
            sources.push((PortRef::new(&s.name, &p.name), p.modality));
        }
    }
    let modality_of = |r: &PortRef| sources.iter().find(|(s, _)| s == r).map(|(_, m)| *m);
    let target_of = |r: &PortRef| {
        spec.stages
            .iter()
            .find(|s| s.name == r.node)
            .and_then(|s| s.inputs.iter().find(|p| p.name == r.port))
            .map(|p| p.modality)
    };

    let mut out = Vec::new();
    for (i, b) in spec.bindings.iter().enumerate() {
        let mut dropped = spec.clone();
        dropped.bindings.remove(i);
        out.push(BindingMutation {
            description: format!("drop '{}'", b.label()),
            spec: dropped,
            blamed: vec![b.to.to_string()],
        });

        let target = target_of(&b.to).expect("mutations start from a valid pipeline");
        for (src, m) in &sources {
            if src == &b.from || m.feeds(target) {
                continue;
            }
            let mut rebound = spec.clone();
            rebound.bindings[i].from = src.clone();
            out.push(BindingMutation {
                description: format!("rebind {} to {src}", b.to),
                spec: rebound,
                blamed: vec![b.to.to_string()],
            });
        }

        for (j, c) in spec.bindings.iter().enumerate().skip(i + 1) {
            let (mi, mj) = (modality_of(&b.from).unwrap(), modality_of(&c.from).unwrap());
            let (ti, tj) = (target_of(&b.to).unwrap(), target_of(&c.to).unwrap());
            if mj.feeds(ti) && mi.feeds(tj) {
                continue;
            }
            let mut swapped = spec.clone();
            swapped.bindings[i].from = c.from.clone();
            swapped.bindings[j].from = b.from.clone();
            out.push(BindingMutation {
                description: format!("swap sources of {} and {}", b.to, c.to),
                spec: swapped,
                blamed: vec![b.to.to_string(), c.to.to_string()],
            });
        }
    }
    out
}
