//! The typed scene graph and its textual serialization.
//!
//! A graph holds entity nodes discovered in the image plus six fixed view
//! nodes, one per cube face, with predefined inter-view relations. The
//! serialized form has three sections — node list, attribute relations,
//! spatial relations — with one relation per line joined by the arrow token
//! `" → "`. Serialization is deterministic and [`SceneGraph::parse`] is its
//! exact inverse.

use crate::geom::{Face, PixelBox};
use serde::Serialize;
use thiserror::Error;

/// Arrow token separating relation fields; reserved, never allowed in texts.
pub const ARROW: &str = " → ";

const NODES_HEADER: &str = "List of nodes:";
const ATTRIBUTES_HEADER: &str = "Attribute relations:";
const SPATIAL_HEADER: &str = "Spatial relations:";

/// The six view nodes in serialization order, with their fixed attributes.
pub const VIEW_NODES: [(Face, &str, &str); 6] = [
    (
        Face::Left,
        "left view",
        "Left side of the scene and to the left of the viewer.",
    ),
    (
        Face::Right,
        "right view",
        "Right side of the scene and to the right of the viewer.",
    ),
    (
        Face::Front,
        "front view",
        "Front of the scene and front of the viewer.",
    ),
    (
        Face::Back,
        "behind view",
        "Back of the scene and behind the viewer.",
    ),
    (
        Face::Top,
        "top view",
        "Top of the scene and above the viewer.",
    ),
    (
        Face::Bottom,
        "bottom view",
        "Bottom of the scene and below the viewer.",
    ),
];

/// Fixed attribute text of a view node.
pub fn view_attribute(face: Face) -> &'static str {
    VIEW_NODES
        .iter()
        .find(|(f, _, _)| *f == face)
        .map(|(_, _, a)| *a)
        .expect("every face has a view node")
}

/// The full predefined inter-view relation table: the three opposite pairs
/// plus the adjacency lines relating the horizontal ring and top/bottom to
/// the front and behind views.
pub const INTER_VIEW_RELATIONS: [(&str, &str, &str); 11] = [
    ("front view", "opposite", "behind view"),
    ("left view", "opposite", "right view"),
    ("top view", "opposite", "bottom view"),
    ("left view", "left of", "front view"),
    ("right view", "right of", "front view"),
    ("left view", "right of", "behind view"),
    ("right view", "left of", "behind view"),
    ("top view", "above", "front view"),
    ("top view", "above", "behind view"),
    ("bottom view", "below", "front view"),
    ("bottom view", "below", "behind view"),
];

/// Which predefined inter-view relations a new graph carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InterViewRelations {
    /// Opposite pairs plus adjacency lines (the full table).
    #[default]
    Full,
    /// Only the three opposite pairs.
    OppositeOnly,
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("entity label must not be empty")]
    EmptyLabel,
    #[error("unknown entity id {0}")]
    UnknownEntity(usize),
    #[error("inter-entity relation for this ordered pair already exists")]
    DuplicatePair,
    #[error("entity already has a view relation")]
    DuplicateViewRelation,
    #[error("{what} must not contain the arrow token or line breaks")]
    ReservedToken { what: &'static str },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Handle to an entity node; stable for the lifetime of the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct EntityId(pub usize);

/// An entity detected in the image.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntityNode {
    pub label: String,
    /// 1-based instance index among entities sharing the label.
    pub index: u32,
    /// Attribute text from attribute extraction; empty until then.
    pub attribute: String,
    pub box_cmp: PixelBox,
    /// Box transported to the ERP frame, once computed.
    pub box_erp: Option<PixelBox>,
    /// View node this entity belongs to, once assigned.
    pub view: Option<Face>,
}

impl EntityNode {
    /// `"label index"`, e.g. `"person 1"`.
    pub fn display_name(&self) -> String {
        format!("{} {}", self.label, self.index)
    }
}

/// An inter-entity spatial relation (source → predicate → target).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InterEntityRelation {
    pub source: EntityId,
    pub predicate: String,
    pub target: EntityId,
}

/// The scene graph: entity nodes, the six view nodes, and their relations.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGraph {
    entities: Vec<EntityNode>,
    inter_entity: Vec<InterEntityRelation>,
    inter_view: Vec<(String, String, String)>,
}

impl Default for SceneGraph {
    fn default() -> Self {
        Self::new()
    }
}

/// Replace reserved byte sequences (the arrow token and line breaks) so a
/// text is safe to store in a graph.
pub fn sanitize_text(text: &str) -> String {
    text.replace(ARROW, " -> ")
        .replace(['\n', '\r'], " ")
        .trim()
        .to_string()
}

fn check_reserved(text: &str, what: &'static str) -> Result<(), GraphError> {
    if text.contains(ARROW) || text.contains('\n') || text.contains('\r') {
        return Err(GraphError::ReservedToken { what });
    }
    Ok(())
}

impl SceneGraph {
    /// Empty graph with the six view nodes and the full inter-view table.
    pub fn new() -> Self {
        Self::with_inter_view(InterViewRelations::Full)
    }

    pub fn with_inter_view(mode: InterViewRelations) -> Self {
        let count = match mode {
            InterViewRelations::Full => INTER_VIEW_RELATIONS.len(),
            InterViewRelations::OppositeOnly => 3,
        };
        Self {
            entities: Vec::new(),
            inter_entity: Vec::new(),
            inter_view: INTER_VIEW_RELATIONS[..count]
                .iter()
                .map(|(s, p, t)| (s.to_string(), p.to_string(), t.to_string()))
                .collect(),
        }
    }

    /// Append an entity; its instance index is one plus the number of
    /// existing entities with the same label.
    pub fn add_entity(&mut self, label: &str, box_cmp: PixelBox) -> Result<EntityId, GraphError> {
        let label = label.trim();
        if label.is_empty() {
            return Err(GraphError::EmptyLabel);
        }
        check_reserved(label, "entity label")?;
        let index = self.entities.iter().filter(|e| e.label == label).count() as u32 + 1;
        self.entities.push(EntityNode {
            label: label.to_string(),
            index,
            attribute: String::new(),
            box_cmp,
            box_erp: None,
            view: None,
        });
        Ok(EntityId(self.entities.len() - 1))
    }

    pub fn set_attribute(&mut self, id: EntityId, attribute: &str) -> Result<(), GraphError> {
        check_reserved(attribute, "attribute text")?;
        self.entity_mut(id)?.attribute = attribute.trim().to_string();
        Ok(())
    }

    pub fn set_box_erp(&mut self, id: EntityId, box_erp: PixelBox) -> Result<(), GraphError> {
        self.entity_mut(id)?.box_erp = Some(box_erp);
        Ok(())
    }

    /// Record `source → predicate → target`; at most one relation per
    /// ordered pair.
    pub fn add_inter_entity_relation(
        &mut self,
        source: EntityId,
        predicate: &str,
        target: EntityId,
    ) -> Result<(), GraphError> {
        check_reserved(predicate, "relation predicate")?;
        self.entity(source)?;
        self.entity(target)?;
        if self
            .inter_entity
            .iter()
            .any(|r| r.source == source && r.target == target)
        {
            return Err(GraphError::DuplicatePair);
        }
        self.inter_entity.push(InterEntityRelation {
            source,
            predicate: predicate.trim().to_string(),
            target,
        });
        Ok(())
    }

    /// Link an entity to its view node; the predicate is always `"in"`.
    pub fn add_entity_view_relation(&mut self, id: EntityId, face: Face) -> Result<(), GraphError> {
        let entity = self.entity_mut(id)?;
        if entity.view.is_some() {
            return Err(GraphError::DuplicateViewRelation);
        }
        entity.view = Some(face);
        Ok(())
    }

    pub fn entity(&self, id: EntityId) -> Result<&EntityNode, GraphError> {
        self.entities.get(id.0).ok_or(GraphError::UnknownEntity(id.0))
    }

    fn entity_mut(&mut self, id: EntityId) -> Result<&mut EntityNode, GraphError> {
        self.entities
            .get_mut(id.0)
            .ok_or(GraphError::UnknownEntity(id.0))
    }

    pub fn entities(&self) -> &[EntityNode] {
        &self.entities
    }

    pub fn entity_ids(&self) -> impl Iterator<Item = EntityId> {
        (0..self.entities.len()).map(EntityId)
    }

    pub fn inter_entity_relations(&self) -> &[InterEntityRelation] {
        &self.inter_entity
    }

    pub fn inter_view_relations(&self) -> &[(String, String, String)] {
        &self.inter_view
    }

    /// Number of entities whose view relation has been assigned.
    pub fn entity_view_count(&self) -> usize {
        self.entities.iter().filter(|e| e.view.is_some()).count()
    }

    /// Serialize to the structured text fed to the model.
    ///
    /// Sections appear in fixed order; entities keep insertion order, view
    /// nodes their table order. Entities with an empty attribute emit no
    /// attribute line.
    ///
    /// ```
    /// use free360_core::geom::{Face, PixelBox};
    /// use free360_core::graph::SceneGraph;
    ///
    /// let mut g = SceneGraph::new();
    /// let id = g.add_entity("person", PixelBox::new(0.0, 0.0, 10.0, 10.0))?;
    /// g.set_attribute(id, "red jacket")?;
    /// g.add_entity_view_relation(id, Face::Front)?;
    ///
    /// let text = g.serialize();
    /// assert!(text.contains("person 1 → red jacket\n"));
    /// assert!(text.contains("person 1 → in → front view\n"));
    /// assert_eq!(SceneGraph::parse(&text)?.serialize(), text);
    /// # Ok::<(), free360_core::graph::GraphError>(())
    /// ```
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        out.push_str(NODES_HEADER);
        out.push('\n');
        for e in &self.entities {
            out.push_str(&e.display_name());
            out.push('\n');
        }
        for (_, label, _) in VIEW_NODES {
            out.push_str(label);
            out.push('\n');
        }

        out.push_str(ATTRIBUTES_HEADER);
        out.push('\n');
        for e in &self.entities {
            if !e.attribute.is_empty() {
                out.push_str(&format!("{}{ARROW}{}\n", e.display_name(), e.attribute));
            }
        }
        for (_, label, attr) in VIEW_NODES {
            out.push_str(&format!("{label}{ARROW}{attr}\n"));
        }

        out.push_str(SPATIAL_HEADER);
        out.push('\n');
        for e in &self.entities {
            if let Some(face) = e.view {
                out.push_str(&format!(
                    "{}{ARROW}in{ARROW}{}\n",
                    e.display_name(),
                    face.view_label()
                ));
            }
        }
        for r in &self.inter_entity {
            let src = &self.entities[r.source.0];
            let dst = &self.entities[r.target.0];
            out.push_str(&format!(
                "{}{ARROW}{}{ARROW}{}\n",
                src.display_name(),
                r.predicate,
                dst.display_name()
            ));
        }
        for (s, p, t) in &self.inter_view {
            out.push_str(&format!("{s}{ARROW}{p}{ARROW}{t}\n"));
        }
        out
    }

    /// Parse text produced by [`SceneGraph::serialize`].
    pub fn parse(text: &str) -> Result<SceneGraph, GraphError> {
        let err = |line: usize, message: String| GraphError::Parse { line, message };
        let mut graph = SceneGraph {
            entities: Vec::new(),
            inter_entity: Vec::new(),
            inter_view: Vec::new(),
        };

        #[derive(PartialEq)]
        enum Section {
            Start,
            Nodes,
            Attributes,
            Spatial,
        }
        let mut section = Section::Start;
        let mut seen_views = 0usize;

        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            match raw {
                NODES_HEADER => {
                    if section != Section::Start {
                        return Err(err(line_no, "unexpected node section header".into()));
                    }
                    section = Section::Nodes;
                    continue;
                }
                ATTRIBUTES_HEADER => {
                    if section != Section::Nodes {
                        return Err(err(line_no, "unexpected attribute section header".into()));
                    }
                    section = Section::Attributes;
                    continue;
                }
                SPATIAL_HEADER => {
                    if section != Section::Attributes {
                        return Err(err(line_no, "unexpected spatial section header".into()));
                    }
                    section = Section::Spatial;
                    continue;
                }
                _ => {}
            }
            match section {
                Section::Start => {
                    return Err(err(line_no, format!("expected '{NODES_HEADER}'")));
                }
                Section::Nodes => {
                    if Face::from_view_label(raw).is_some() {
                        seen_views += 1;
                        continue;
                    }
                    let (label, index) = split_display_name(raw)
                        .ok_or_else(|| err(line_no, format!("invalid node line '{raw}'")))?;
                    let id = graph
                        .add_entity(label, PixelBox::new(0.0, 0.0, 0.0, 0.0))
                        .map_err(|e| err(line_no, e.to_string()))?;
                    if graph.entities[id.0].index != index {
                        return Err(err(
                            line_no,
                            format!("entity index {index} out of insertion order"),
                        ));
                    }
                }
                Section::Attributes => {
                    let (source, attr) = raw
                        .split_once(ARROW)
                        .ok_or_else(|| err(line_no, format!("missing arrow in '{raw}'")))?;
                    if let Some(face) = Face::from_view_label(source) {
                        if attr != view_attribute(face) {
                            return Err(err(
                                line_no,
                                format!("view attribute mismatch for '{source}'"),
                            ));
                        }
                    } else {
                        let id = graph
                            .entity_by_name(source)
                            .ok_or_else(|| err(line_no, format!("unknown node '{source}'")))?;
                        graph
                            .set_attribute(id, attr)
                            .map_err(|e| err(line_no, e.to_string()))?;
                    }
                }
                Section::Spatial => {
                    let mut parts = raw.split(ARROW);
                    let (Some(a), Some(p), Some(b), None) =
                        (parts.next(), parts.next(), parts.next(), parts.next())
                    else {
                        return Err(err(line_no, format!("expected 'a{ARROW}p{ARROW}b' in '{raw}'")));
                    };
                    match (Face::from_view_label(a), Face::from_view_label(b)) {
                        (Some(_), Some(_)) => {
                            if !INTER_VIEW_RELATIONS
                                .iter()
                                .any(|(s, pr, t)| *s == a && *pr == p && *t == b)
                            {
                                return Err(err(
                                    line_no,
                                    format!("'{raw}' is not a predefined inter-view relation"),
                                ));
                            }
                            graph
                                .inter_view
                                .push((a.to_string(), p.to_string(), b.to_string()));
                        }
                        (None, Some(face)) => {
                            if p != "in" {
                                return Err(err(
                                    line_no,
                                    format!("entity-view predicate must be 'in', got '{p}'"),
                                ));
                            }
                            let id = graph
                                .entity_by_name(a)
                                .ok_or_else(|| err(line_no, format!("unknown node '{a}'")))?;
                            graph
                                .add_entity_view_relation(id, face)
                                .map_err(|e| err(line_no, e.to_string()))?;
                        }
                        (None, None) => {
                            let src = graph
                                .entity_by_name(a)
                                .ok_or_else(|| err(line_no, format!("unknown node '{a}'")))?;
                            let dst = graph
                                .entity_by_name(b)
                                .ok_or_else(|| err(line_no, format!("unknown node '{b}'")))?;
                            graph
                                .add_inter_entity_relation(src, p, dst)
                                .map_err(|e| err(line_no, e.to_string()))?;
                        }
                        (Some(_), None) => {
                            return Err(err(
                                line_no,
                                format!("view node '{a}' cannot relate to an entity"),
                            ));
                        }
                    }
                }
            }
        }
        if section != Section::Spatial {
            return Err(err(
                text.lines().count(),
                format!("missing '{SPATIAL_HEADER}' section"),
            ));
        }
        if seen_views != 6 {
            return Err(err(
                text.lines().count(),
                format!("expected 6 view nodes, found {seen_views}"),
            ));
        }
        Ok(graph)
    }

    fn entity_by_name(&self, name: &str) -> Option<EntityId> {
        self.entities
            .iter()
            .position(|e| e.display_name() == name)
            .map(EntityId)
    }

    /// JSON dump for logging, with `entities`, `views`, and `relations`.
    pub fn to_json(&self) -> serde_json::Value {
        let views: Vec<_> = VIEW_NODES
            .iter()
            .map(|(_, label, attr)| serde_json::json!({ "label": label, "attribute": attr }))
            .collect();
        let mut relations = Vec::new();
        for e in &self.entities {
            if !e.attribute.is_empty() {
                relations.push(serde_json::json!({
                    "kind": "attribute",
                    "source": e.display_name(),
                    "target": e.attribute,
                }));
            }
        }
        for e in &self.entities {
            if let Some(face) = e.view {
                relations.push(serde_json::json!({
                    "kind": "entity-view",
                    "source": e.display_name(),
                    "predicate": "in",
                    "target": face.view_label(),
                }));
            }
        }
        for r in &self.inter_entity {
            relations.push(serde_json::json!({
                "kind": "inter-entity",
                "source": self.entities[r.source.0].display_name(),
                "predicate": r.predicate,
                "target": self.entities[r.target.0].display_name(),
            }));
        }
        for (s, p, t) in &self.inter_view {
            relations.push(serde_json::json!({
                "kind": "inter-view",
                "source": s,
                "predicate": p,
                "target": t,
            }));
        }
        serde_json::json!({
            "entities": self.entities,
            "views": views,
            "relations": relations,
        })
    }
}

/// Split `"label index"` into the label and its 1-based index.
fn split_display_name(name: &str) -> Option<(&str, u32)> {
    let (label, idx) = name.rsplit_once(' ')?;
    if label.is_empty() {
        return None;
    }
    idx.parse::<u32>().ok().map(|i| (label, i))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx() -> PixelBox {
        PixelBox::new(1.0, 2.0, 3.0, 4.0)
    }

    #[test]
    fn new_graph_has_six_views_and_the_opposite_relation() {
        let g = SceneGraph::new();
        assert_eq!(VIEW_NODES.len(), 6);
        assert!(g.entities().is_empty());
        assert!(g
            .inter_view_relations()
            .iter()
            .any(|(s, p, t)| s == "front view" && p == "opposite" && t == "behind view"));

        let text = g.serialize();
        assert!(text.contains("front view → opposite → behind view\n"));
        assert!(text.contains("top view → Top of the scene and above the viewer.\n"));
    }

    #[test]
    fn opposite_only_mode_drops_adjacency_lines() {
        let g = SceneGraph::with_inter_view(InterViewRelations::OppositeOnly);
        assert_eq!(g.inter_view_relations().len(), 3);
        let text = g.serialize();
        assert!(!text.contains(" → left of → "));
        assert!(!text.contains(" → above → "));
        assert!(text.contains("left view → opposite → right view\n"));
    }

    #[test]
    fn entity_indices_differentiate_shared_labels() {
        let mut g = SceneGraph::new();
        let a = g.add_entity("person", bx()).unwrap();
        let b = g.add_entity("person", bx()).unwrap();
        let c = g.add_entity("dog", bx()).unwrap();
        assert_eq!(g.entity(a).unwrap().display_name(), "person 1");
        assert_eq!(g.entity(b).unwrap().display_name(), "person 2");
        assert_eq!(g.entity(c).unwrap().display_name(), "dog 1");
        assert!(g.add_entity("", bx()).is_err());
    }

    #[test]
    fn entity_ids_stay_stable_and_unique() {
        let mut g = SceneGraph::new();
        let ids: Vec<_> = (0..1000)
            .map(|i| g.add_entity(&format!("thing{}", i % 7), bx()).unwrap())
            .collect();
        for (i, id) in ids.iter().enumerate() {
            assert_eq!(id.0, i);
        }
        let mut sorted = ids.clone();
        sorted.dedup();
        assert_eq!(sorted.len(), 1000);
    }

    #[test]
    fn relation_lines_match_the_textual_format() {
        let mut g = SceneGraph::new();
        let p = g.add_entity("person", bx()).unwrap();
        let c = g.add_entity("car", bx()).unwrap();
        g.set_attribute(p, "red jacket, holding umbrella").unwrap();
        g.add_inter_entity_relation(p, "to the left of", c).unwrap();
        g.add_entity_view_relation(p, Face::Front).unwrap();

        let text = g.serialize();
        assert!(text.contains("person 1 → red jacket, holding umbrella\n"));
        assert!(text.contains("person 1 → to the left of → car 1\n"));
        assert!(text.contains("person 1 → in → front view\n"));

        assert!(matches!(
            g.add_inter_entity_relation(p, "again", c),
            Err(GraphError::DuplicatePair)
        ));
        // The reverse ordered pair is a different relation.
        g.add_inter_entity_relation(c, "to the right of", p).unwrap();
        assert!(matches!(
            g.add_entity_view_relation(p, Face::Back),
            Err(GraphError::DuplicateViewRelation)
        ));
    }

    #[test]
    fn arrow_token_is_rejected_at_insertion() {
        let mut g = SceneGraph::new();
        let p = g.add_entity("person", bx()).unwrap();
        assert!(matches!(
            g.set_attribute(p, "weird → text"),
            Err(GraphError::ReservedToken { .. })
        ));
        assert_eq!(sanitize_text("weird → text"), "weird -> text");
        g.set_attribute(p, &sanitize_text("weird → text")).unwrap();
    }

    #[test]
    fn empty_graph_serialization_counts() {
        let text = SceneGraph::new().serialize();
        let lines: Vec<&str> = text.lines().collect();
        let nodes_at = lines.iter().position(|l| *l == NODES_HEADER).unwrap();
        let attrs_at = lines.iter().position(|l| *l == ATTRIBUTES_HEADER).unwrap();
        let spatial_at = lines.iter().position(|l| *l == SPATIAL_HEADER).unwrap();
        assert_eq!(attrs_at - nodes_at - 1, 6, "six view nodes, no entities");
        assert_eq!(spatial_at - attrs_at - 1, 6, "six view attribute lines");
        assert_eq!(
            lines.len() - spatial_at - 1,
            INTER_VIEW_RELATIONS.len(),
            "predefined inter-view lines only"
        );
    }

    #[test]
    fn populated_graph_section_counts() {
        let mut g = SceneGraph::new();
        let a = g.add_entity("person", bx()).unwrap();
        let b = g.add_entity("car", bx()).unwrap();
        g.set_attribute(a, "tall").unwrap();
        g.set_attribute(b, "blue sedan").unwrap();
        g.add_inter_entity_relation(a, "next to", b).unwrap();
        g.add_entity_view_relation(a, Face::Front).unwrap();
        g.add_entity_view_relation(b, Face::Left).unwrap();

        let text = g.serialize();
        let lines: Vec<&str> = text.lines().collect();
        let nodes_at = lines.iter().position(|l| *l == NODES_HEADER).unwrap();
        let attrs_at = lines.iter().position(|l| *l == ATTRIBUTES_HEADER).unwrap();
        let spatial_at = lines.iter().position(|l| *l == SPATIAL_HEADER).unwrap();
        assert_eq!(attrs_at - nodes_at - 1, 8, "2 entities + 6 views");
        assert_eq!(spatial_at - attrs_at - 1, 8, "2 entity + 6 view attribute lines");
        assert_eq!(
            lines.len() - spatial_at - 1,
            3 + INTER_VIEW_RELATIONS.len(),
            "2 entity-view + 1 inter-entity + inter-view lines"
        );
    }

    #[test]
    fn parse_round_trips_random_graphs() {
        let mut seed = 0x2545F4914F6CDD1Du64;
        let mut next = move || {
            seed ^= seed << 13;
            seed ^= seed >> 7;
            seed ^= seed << 17;
            seed
        };
        let labels = ["person", "car", "sign", "tree", "dog"];
        let predicates = ["left of", "behind", "next to", "above"];
        for _ in 0..200 {
            let mut g = SceneGraph::new();
            let n = (next() % 8) as usize;
            let ids: Vec<_> = (0..n)
                .map(|i| g.add_entity(labels[i % labels.len()], bx()).unwrap())
                .collect();
            for &id in &ids {
                if next() % 2 == 0 {
                    g.set_attribute(id, predicates[(next() % 4) as usize]).unwrap();
                }
                if next() % 2 == 0 {
                    let face = Face::ALL[(next() % 6) as usize];
                    g.add_entity_view_relation(id, face).unwrap();
                }
            }
            for i in 0..n {
                for j in (i + 1)..n {
                    if next() % 3 == 0 {
                        g.add_inter_entity_relation(
                            ids[i],
                            predicates[(next() % 4) as usize],
                            ids[j],
                        )
                        .unwrap();
                    }
                }
            }
            let text = g.serialize();
            let parsed = SceneGraph::parse(&text).unwrap();
            // Boxes are not part of the textual form.
            let mut norm = g.clone();
            for id in 0..norm.entities.len() {
                norm.entities[id].box_cmp = PixelBox::new(0.0, 0.0, 0.0, 0.0);
                norm.entities[id].box_erp = None;
            }
            assert_eq!(parsed, norm);
            assert_eq!(parsed.serialize(), text, "serialize is stable under round trip");
        }
    }

    #[test]
    fn parse_rejects_malformed_input() {
        let mut g = SceneGraph::new();
        g.add_entity("person", bx()).unwrap();
        let text = g.serialize();

        let missing = text.replace("Spatial relations:\n", "");
        let e = SceneGraph::parse(&missing).unwrap_err();
        assert!(matches!(e, GraphError::Parse { .. }), "{e}");

        let bad_arrow = text.replace("front view → opposite", "front view ~ opposite");
        assert!(SceneGraph::parse(&bad_arrow).is_err());

        assert!(SceneGraph::parse("").is_err());
    }

    #[test]
    fn json_dump_has_the_three_top_level_fields() {
        let mut g = SceneGraph::new();
        let a = g.add_entity("person", bx()).unwrap();
        g.set_attribute(a, "tall").unwrap();
        let v = g.to_json();
        assert!(v.get("entities").is_some());
        assert_eq!(v["views"].as_array().unwrap().len(), 6);
        assert!(v["relations"].as_array().unwrap().len() > 1);
    }
}
