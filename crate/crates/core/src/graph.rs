//! Loading, merging and indexing of the interaction graph and the knowledge graph.
//!
//! Users, items and knowledge-graph entities all live in one dense entity id
//! space. Interactions become triples with a dedicated `interact` relation,
//! and every relation gets a materialized inverse so propagation can flow in
//! both directions.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{KcanError, Result};

pub type EntityId = u32;
pub type RelationId = u32;

/// Resampling attempts before falling back to enumerating valid candidates.
pub const NEGATIVE_SAMPLING_CAP: usize = 100;

pub const INTERACT_RELATION: &str = "interact";
const INVERSE_SUFFIX: &str = "_inv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: EntityId, relation: RelationId, tail: EntityId) -> Self {
        Triple { head, relation, tail }
    }
}

/// Bidirectional map between raw string ids and dense indices, in first-seen order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdMap {
    names: Vec<String>,
    index: HashMap<String, u32>,
}

impl IdMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_insert(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        id
    }

    /// Inserts a name that must not exist yet.
    fn insert_fresh(&mut self, name: String) -> Option<u32> {
        if self.index.contains_key(&name) {
            return None;
        }
        let id = self.names.len() as u32;
        self.index.insert(name.clone(), id);
        self.names.push(name);
        Some(id)
    }

    pub fn get(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: u32) -> &str {
        &self.names[id as usize]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Bipartite user-item graph with dense ids.
#[derive(Debug, Clone)]
pub struct InteractionGraph {
    pub users: IdMap,
    pub items: IdMap,
    /// Sorted, duplicate-free `(user, item)` pairs.
    pub edges: Vec<(u32, u32)>,
}

impl InteractionGraph {
    pub fn user_count(&self) -> usize {
        self.users.len()
    }

    pub fn item_count(&self) -> usize {
        self.items.len()
    }

    /// Same id maps with a different edge set (used for the train graph of a split).
    pub fn with_edges(&self, mut edges: Vec<(u32, u32)>) -> InteractionGraph {
        edges.sort_unstable();
        edges.dedup();
        InteractionGraph {
            users: self.users.clone(),
            items: self.items.clone(),
            edges,
        }
    }

    /// Sorted item lists per user.
    pub fn items_by_user(&self) -> Vec<Vec<u32>> {
        let mut out = vec![Vec::new(); self.user_count()];
        for &(u, i) in &self.edges {
            out[u as usize].push(i);
        }
        out
    }
}

fn split_fields(line: &str) -> Vec<&str> {
    line.trim_end_matches('\r').split('\t').collect()
}

fn read_file(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| KcanError::io(path, e))
}

/// Parses `user \t item [\t ...]` lines; extra fields (e.g. timestamps) are ignored.
pub fn parse_interactions(reader: impl BufRead, source_name: &str) -> Result<InteractionGraph> {
    let mut users = IdMap::new();
    let mut items = IdMap::new();
    let mut edges = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| KcanError::io(source_name, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields = split_fields(&line);
        if fields.len() < 2 || fields[0].is_empty() || fields[1].is_empty() {
            return Err(KcanError::Parse {
                source_name: source_name.to_string(),
                line: idx + 1,
                msg: format!("expected `user<TAB>item`, got {line:?}"),
            });
        }
        let u = users.get_or_insert(fields[0]);
        let i = items.get_or_insert(fields[1]);
        edges.push((u, i));
    }
    if edges.is_empty() {
        return Err(KcanError::Empty(source_name.to_string()));
    }
    edges.sort_unstable();
    edges.dedup();
    Ok(InteractionGraph { users, items, edges })
}

pub fn load_interactions(path: impl AsRef<Path>) -> Result<InteractionGraph> {
    let path = path.as_ref();
    parse_interactions(read_file(path)?, &path.display().to_string())
}

/// Knowledge-graph triples with their own dense entity and relation ids.
#[derive(Debug, Clone, Default)]
pub struct RawTriples {
    pub entities: IdMap,
    pub relations: IdMap,
    /// Sorted and de-duplicated.
    pub triples: Vec<Triple>,
}

/// Parses `head \t relation \t tail` lines. An empty input yields an empty graph.
pub fn parse_triples(reader: impl BufRead, source_name: &str) -> Result<RawTriples> {
    let mut kg = RawTriples::default();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| KcanError::io(source_name, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields = split_fields(&line);
        let bad = |msg: &str| KcanError::Parse {
            source_name: source_name.to_string(),
            line: idx + 1,
            msg: format!("{msg}: {line:?}"),
        };
        if fields.len() < 3 {
            return Err(bad("expected `head<TAB>relation<TAB>tail`"));
        }
        if fields[..3].iter().any(|f| f.is_empty()) {
            return Err(bad("empty head, relation or tail"));
        }
        let h = kg.entities.get_or_insert(fields[0]);
        let r = kg.relations.get_or_insert(fields[1]);
        let t = kg.entities.get_or_insert(fields[2]);
        kg.triples.push(Triple::new(h, r, t));
    }
    kg.triples.sort_unstable();
    kg.triples.dedup();
    Ok(kg)
}

pub fn load_triples(path: impl AsRef<Path>) -> Result<RawTriples> {
    let path = path.as_ref();
    parse_triples(read_file(path)?, &path.display().to_string())
}

/// Parses `item \t entity` lines.
pub fn parse_alignment(reader: impl BufRead, source_name: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| KcanError::io(source_name, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields = split_fields(&line);
        if fields.len() < 2 || fields[0].is_empty() || fields[1].is_empty() {
            return Err(KcanError::Parse {
                source_name: source_name.to_string(),
                line: idx + 1,
                msg: format!("expected `item<TAB>entity`, got {line:?}"),
            });
        }
        out.push((fields[0].to_string(), fields[1].to_string()));
    }
    Ok(out)
}

pub fn load_alignment(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    parse_alignment(read_file(path)?, &path.display().to_string())
}

/// Merged graph over users, items and knowledge entities.
#[derive(Debug, Clone)]
pub struct UnifiedGraph {
    pub entities: IdMap,
    pub relations: IdMap,
    /// Sorted by `(head, relation, tail)`; closed under inversion.
    pub triples: Vec<Triple>,
    inverse_of: Vec<RelationId>,
    interact: RelationId,
    adj_offsets: Vec<usize>,
    adj: Vec<(RelationId, EntityId)>,
    user_entity: Vec<EntityId>,
    item_entity: Vec<EntityId>,
    entity_item: Vec<Option<u32>>,
    /// Sorted item indices per user, from the interactions the graph was built on.
    user_items: Vec<Vec<u32>>,
    interactions: Vec<(u32, u32)>,
}

/// Builds the unified graph: KG entities keep their ids, aligned items reuse
/// (or create) the named entity, remaining items and all users get fresh entities.
pub fn unify(inter: &InteractionGraph, kg: &RawTriples, alignment: &[(String, String)]) -> Result<UnifiedGraph> {
    let mut entities = kg.entities.clone();
    let n_kg_rel = kg.relations.len() as u32;

    let mut item_entity: Vec<Option<EntityId>> = vec![None; inter.item_count()];
    let mut claimed: HashMap<EntityId, u32> = HashMap::new();
    for (item_raw, entity_raw) in alignment {
        let item = inter
            .items
            .get(item_raw)
            .ok_or_else(|| KcanError::Alignment(format!("item {item_raw:?} does not occur in the interactions")))?;
        let ent = entities.get_or_insert(entity_raw);
        if let Some(prev) = item_entity[item as usize] {
            if prev != ent {
                return Err(KcanError::Alignment(format!(
                    "item {item_raw:?} is aligned to more than one entity"
                )));
            }
            continue;
        }
        if let Some(&other) = claimed.get(&ent) {
            return Err(KcanError::Alignment(format!(
                "entity {entity_raw:?} is aligned to items {:?} and {item_raw:?}",
                inter.items.name(other)
            )));
        }
        claimed.insert(ent, item);
        item_entity[item as usize] = Some(ent);
    }
    let mut items_out = Vec::with_capacity(inter.item_count());
    for (i, slot) in item_entity.iter().enumerate() {
        let ent = match slot {
            Some(e) => *e,
            None => {
                let name = format!("item:{}", inter.items.name(i as u32));
                entities.insert_fresh(name.clone()).ok_or_else(|| {
                    KcanError::Alignment(format!("fresh item entity {name:?} collides with a KG entity"))
                })?
            }
        };
        items_out.push(ent);
    }
    let mut user_entity = Vec::with_capacity(inter.user_count());
    for u in 0..inter.user_count() {
        let name = format!("user:{}", inter.users.name(u as u32));
        let ent = entities
            .insert_fresh(name.clone())
            .ok_or_else(|| KcanError::Alignment(format!("user entity {name:?} collides with a KG entity")))?;
        user_entity.push(ent);
    }

    let mut relations = IdMap::new();
    for r in 0..n_kg_rel {
        relations.get_or_insert(kg.relations.name(r));
    }
    for r in 0..n_kg_rel {
        let name = format!("{}{INVERSE_SUFFIX}", kg.relations.name(r));
        if relations.insert_fresh(name.clone()).is_none() {
            return Err(KcanError::Alignment(format!(
                "inverse relation name {name:?} already used"
            )));
        }
    }
    let interact = relations
        .insert_fresh(INTERACT_RELATION.to_string())
        .ok_or_else(|| KcanError::Alignment(format!("relation name {INTERACT_RELATION:?} is reserved")))?;
    let interact_inv = relations
        .insert_fresh(format!("{INTERACT_RELATION}{INVERSE_SUFFIX}"))
        .ok_or_else(|| KcanError::Alignment("reserved inverse interaction name is taken".into()))?;
    let mut inverse_of = vec![0; relations.len()];
    for r in 0..n_kg_rel {
        inverse_of[r as usize] = r + n_kg_rel;
        inverse_of[(r + n_kg_rel) as usize] = r;
    }
    inverse_of[interact as usize] = interact_inv;
    inverse_of[interact_inv as usize] = interact;

    let mut triples = Vec::with_capacity(2 * (kg.triples.len() + inter.edges.len()));
    for t in &kg.triples {
        triples.push(*t);
        triples.push(Triple::new(t.tail, inverse_of[t.relation as usize], t.head));
    }
    for &(u, i) in &inter.edges {
        let (ue, ie) = (user_entity[u as usize], items_out[i as usize]);
        triples.push(Triple::new(ue, interact, ie));
        triples.push(Triple::new(ie, interact_inv, ue));
    }
    triples.sort_unstable();
    triples.dedup();

    let n = entities.len();
    let mut adj_offsets = vec![0usize; n + 1];
    for t in &triples {
        adj_offsets[t.head as usize + 1] += 1;
    }
    for v in 0..n {
        adj_offsets[v + 1] += adj_offsets[v];
    }
    let adj = triples.iter().map(|t| (t.relation, t.tail)).collect();

    let mut entity_item = vec![None; n];
    for (i, &e) in items_out.iter().enumerate() {
        entity_item[e as usize] = Some(i as u32);
    }

    Ok(UnifiedGraph {
        entities,
        relations,
        triples,
        inverse_of,
        interact,
        adj_offsets,
        adj,
        user_entity,
        item_entity: items_out,
        entity_item,
        user_items: inter.items_by_user(),
        interactions: inter.edges.clone(),
    })
}

impl UnifiedGraph {
    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    pub fn relation_count(&self) -> usize {
        self.relations.len()
    }

    pub fn triple_count(&self) -> usize {
        self.triples.len()
    }

    pub fn inverse_of(&self, r: RelationId) -> RelationId {
        self.inverse_of[r as usize]
    }

    pub fn interact_relation(&self) -> RelationId {
        self.interact
    }

    /// Out-edges `(relation, tail)` of `v`, sorted.
    pub fn neighbors(&self, v: EntityId) -> &[(RelationId, EntityId)] {
        let v = v as usize;
        &self.adj[self.adj_offsets[v]..self.adj_offsets[v + 1]]
    }

    /// Offset of `v`'s first out-edge in the flat adjacency array.
    pub fn adjacency_offset(&self, v: EntityId) -> usize {
        self.adj_offsets[v as usize]
    }

    pub fn degree(&self, v: EntityId) -> usize {
        self.neighbors(v).len()
    }

    pub fn contains(&self, h: EntityId, r: RelationId, t: EntityId) -> bool {
        (h as usize) < self.entity_count() && self.neighbors(h).binary_search(&(r, t)).is_ok()
    }

    pub fn user_count(&self) -> usize {
        self.user_entity.len()
    }

    pub fn item_count(&self) -> usize {
        self.item_entity.len()
    }

    pub fn user_entity(&self, user: u32) -> EntityId {
        self.user_entity[user as usize]
    }

    pub fn item_entity(&self, item: u32) -> EntityId {
        self.item_entity[item as usize]
    }

    pub fn item_of_entity(&self, e: EntityId) -> Option<u32> {
        self.entity_item[e as usize]
    }

    pub fn user_items(&self, user: u32) -> &[u32] {
        &self.user_items[user as usize]
    }

    /// `(user, item)` pairs the graph was built from.
    pub fn interactions(&self) -> &[(u32, u32)] {
        &self.interactions
    }

    /// Writes `kind \t raw_id \t dense_id` lines for entities and relations.
    pub fn write_id_map(&self, mut w: impl Write) -> std::io::Result<()> {
        for (id, name) in self.entities.names().iter().enumerate() {
            writeln!(w, "entity\t{name}\t{id}")?;
        }
        for (id, name) in self.relations.names().iter().enumerate() {
            writeln!(w, "relation\t{name}\t{id}")?;
        }
        Ok(())
    }

    /// Content hash of the id mapping; stored in snapshots to detect mismatched data.
    pub fn id_map_hash(&self) -> String {
        let mut buf = Vec::new();
        self.write_id_map(&mut buf).expect("write to Vec");
        hex16(&Sha256::digest(&buf))
    }
}

pub(crate) fn hex16(bytes: &[u8]) -> String {
    bytes[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Entity and relation maps read back from an exported id map.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadedIdMap {
    pub entities: IdMap,
    pub relations: IdMap,
}

pub fn parse_id_map(reader: impl BufRead, source_name: &str) -> Result<LoadedIdMap> {
    let mut out = LoadedIdMap::default();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| KcanError::io(source_name, e))?;
        if line.is_empty() {
            continue;
        }
        let fields = split_fields(&line);
        let bad = |msg: &str| KcanError::Parse {
            source_name: source_name.to_string(),
            line: idx + 1,
            msg: msg.to_string(),
        };
        if fields.len() != 3 {
            return Err(bad("expected `kind<TAB>raw_id<TAB>dense_id`"));
        }
        let id: u32 = fields[2].parse().map_err(|_| bad("dense id is not an integer"))?;
        let map = match fields[0] {
            "entity" => &mut out.entities,
            "relation" => &mut out.relations,
            _ => return Err(bad("kind must be `entity` or `relation`")),
        };
        if map.get_or_insert(fields[1]) != id {
            return Err(bad("dense ids must be contiguous and in order"));
        }
    }
    Ok(out)
}

/// Leave-one-out train/test split of an interaction graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataSplit {
    pub train_edges: Vec<(u32, u32)>,
    pub test_edges: Vec<(u32, u32)>,
    pub seed: u64,
}

/// Holds out one uniformly chosen interaction for every user with at least two.
pub fn split_leave_one_out(inter: &InteractionGraph, seed: u64) -> DataSplit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_edges = Vec::with_capacity(inter.edges.len());
    let mut test_edges = Vec::new();
    for (u, items) in inter.items_by_user().iter().enumerate() {
        let u = u as u32;
        if items.len() >= 2 {
            let held = rng.random_range(0..items.len());
            for (k, &i) in items.iter().enumerate() {
                if k == held {
                    test_edges.push((u, i));
                } else {
                    train_edges.push((u, i));
                }
            }
        } else {
            train_edges.extend(items.iter().map(|&i| (u, i)));
        }
    }
    DataSplit {
        train_edges,
        test_edges,
        seed,
    }
}

/// Draws `t'` with `(h, r, t')` absent from the graph, uniformly over all valid entities.
pub fn sample_corrupt_tail(g: &UnifiedGraph, h: EntityId, r: RelationId, rng: &mut impl Rng) -> Result<EntityId> {
    let n = g.entity_count();
    if n < 2 {
        return Err(KcanError::Unsampleable("graph has fewer than two entities".into()));
    }
    for _ in 0..NEGATIVE_SAMPLING_CAP {
        let t = rng.random_range(0..n) as EntityId;
        if !g.contains(h, r, t) {
            return Ok(t);
        }
    }
    // Rejection failed repeatedly; draw exactly from the complement.
    let valid: Vec<EntityId> = (0..n as EntityId).filter(|&t| !g.contains(h, r, t)).collect();
    if valid.is_empty() {
        return Err(KcanError::Unsampleable(format!(
            "every tail is already linked to entity {h} by relation {r}"
        )));
    }
    Ok(valid[rng.random_range(0..valid.len())])
}

/// Draws an item entity the user has not interacted with, uniformly.
pub fn sample_negative_item(g: &UnifiedGraph, user: u32, rng: &mut impl Rng) -> Result<EntityId> {
    let seen = g.user_items(user);
    let n = g.item_count();
    if seen.len() >= n {
        return Err(KcanError::Unsampleable(format!(
            "user {user} has interacted with every item"
        )));
    }
    for _ in 0..NEGATIVE_SAMPLING_CAP {
        let i = rng.random_range(0..n) as u32;
        if seen.binary_search(&i).is_err() {
            return Ok(g.item_entity(i));
        }
    }
    let valid: Vec<u32> = (0..n as u32).filter(|i| seen.binary_search(i).is_err()).collect();
    Ok(g.item_entity(valid[rng.random_range(0..valid.len())]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn inter(text: &str) -> InteractionGraph {
        parse_interactions(text.as_bytes(), "mem").unwrap()
    }

    fn kg(text: &str) -> RawTriples {
        parse_triples(text.as_bytes(), "mem").unwrap()
    }

    #[test]
    fn interactions_are_counted_and_deduplicated() {
        let g = inter("a\tx\na\ty\nb\tx\n");
        assert_eq!((g.user_count(), g.item_count(), g.edges.len()), (2, 2, 3));
        let g = inter("a\tx\na\tx\n");
        assert_eq!(g.edges.len(), 1);
        let g = inter("a\tx\t1600000000\n");
        assert_eq!(g.edges, vec![(0, 0)]);
    }

    #[test]
    fn interaction_errors_carry_line_numbers() {
        match parse_interactions("a\tx\nbroken\n".as_bytes(), "f") {
            Err(KcanError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            parse_interactions("".as_bytes(), "f"),
            Err(KcanError::Empty(_))
        ));
    }

    #[test]
    fn triples_parse_and_dedup() {
        let k = kg("a\tr\tb\nb\tr\tc\nc\ts\td\nd\ts\ta\na\tt\tc\n");
        assert_eq!(k.triples.len(), 5);
        assert_eq!(k.relations.len(), 3);
        assert_eq!(kg("a\tr\tb\na\tr\tb\n").triples.len(), 1);
        assert!(matches!(
            parse_triples("a\t\tb\n".as_bytes(), "f"),
            Err(KcanError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn unify_doubles_triples() {
        let i = inter("u1\ti1\nu1\ti2\nu2\ti1\n");
        let k = kg("e1\tr\te2\ne2\tr\te3\ne3\ts\te1\ne1\ts\te4\n");
        let align = vec![("i1".to_string(), "e1".to_string())];
        let g = unify(&i, &k, &align).unwrap();
        assert_eq!(g.triple_count(), 14);
        assert_eq!(g.relation_count(), 6);
        assert_eq!(g.item_entity(0), k.entities.get("e1").unwrap());
    }

    #[test]
    fn unify_without_kg_is_bipartite() {
        let i = inter("u1\ti1\nu2\ti2\n");
        let g = unify(&i, &RawTriples::default(), &[]).unwrap();
        assert_eq!(g.relation_count(), 2);
        assert_eq!(g.triple_count(), 4);
        let rels: HashSet<_> = g.triples.iter().map(|t| t.relation).collect();
        assert_eq!(rels.len(), 2);
    }

    #[test]
    fn isolated_entity_has_empty_adjacency() {
        let i = inter("u1\ti1\n");
        let g = unify(&i, &kg("a\tr\tb\n"), &[("i1".into(), "lonely".into())]).unwrap();
        // "lonely" aligns i1, which has the interaction edge; a and b are linked.
        let k2 = kg("a\tr\tb\n");
        let mut k3 = k2.clone();
        k3.entities.get_or_insert("c");
        let g2 = unify(&i, &k3, &[]).unwrap();
        assert_eq!(g2.degree(k3.entities.get("c").unwrap()), 0);
        assert!(g.degree(g.item_entity(0)) > 0);
    }

    #[test]
    fn alignment_errors() {
        let i = inter("u1\ti1\nu1\ti2\n");
        let k = kg("e1\tr\te2\n");
        let missing = vec![("nope".to_string(), "e1".to_string())];
        assert!(matches!(unify(&i, &k, &missing), Err(KcanError::Alignment(_))));
        let shared = vec![
            ("i1".to_string(), "e1".to_string()),
            ("i2".to_string(), "e1".to_string()),
        ];
        assert!(matches!(unify(&i, &k, &shared), Err(KcanError::Alignment(_))));
    }

    #[test]
    fn inverse_closure_and_adjacency_soundness() {
        let i = inter("u1\ti1\nu1\ti2\nu2\ti1\n");
        let k = kg("e1\tr\te2\ne2\tr\te3\ne3\ts\te1\n");
        let g = unify(&i, &k, &[("i1".into(), "e1".into())]).unwrap();
        for t in &g.triples {
            assert!(g.contains(t.tail, g.inverse_of(t.relation), t.head));
            if t.relation == g.interact_relation() {
                assert_ne!(t.head, t.tail);
            }
        }
        let mut from_adj = 0;
        for v in 0..g.entity_count() as u32 {
            for &(r, t) in g.neighbors(v) {
                assert!(g.triples.binary_search(&Triple::new(v, r, t)).is_ok());
                from_adj += 1;
            }
        }
        assert_eq!(from_adj, g.triple_count());
    }

    #[test]
    fn id_map_round_trip() {
        let i = inter("u1\ti1\nu2\ti2\n");
        let k = kg("e1\tr\te2\n");
        let g = unify(&i, &k, &[("i1".into(), "e1".into())]).unwrap();
        let mut buf = Vec::new();
        g.write_id_map(&mut buf).unwrap();
        let loaded = parse_id_map(buf.as_slice(), "ids").unwrap();
        assert_eq!(loaded.entities, g.entities);
        assert_eq!(loaded.relations, g.relations);
        let again = unify(&i, &k, &[("i1".into(), "e1".into())]).unwrap();
        assert_eq!(again.id_map_hash(), g.id_map_hash());
    }

    #[test]
    fn split_holds_out_one_per_user() {
        let g = inter("a\t1\na\t2\na\t3\na\t4\na\t5\nb\t1\n");
        let s = split_leave_one_out(&g, 9);
        assert_eq!(s.test_edges.len(), 1);
        assert_eq!(s.test_edges[0].0, 0);
        assert_eq!(s.train_edges.iter().filter(|e| e.0 == 0).count(), 4);
        assert_eq!(s.train_edges.iter().filter(|e| e.0 == 1).count(), 1);
        assert_eq!(s, split_leave_one_out(&g, 9));
        for e in &s.test_edges {
            assert!(!s.train_edges.contains(e));
        }
    }

    #[test]
    fn corrupt_tail_forced_and_degenerate() {
        // h -r-> {b, c, d}: only h itself remains as a valid tail for (h, r).
        let i = inter("u\tit\n");
        let k = kg("h\tr\tb\nh\tr\tc\nh\tr\td\n");
        let g = unify(&i, &k, &[]).unwrap();
        let h = k.entities.get("h").unwrap();
        let r = k.relations.get("r").unwrap();
        let valid: Vec<_> = (0..g.entity_count() as u32).filter(|&t| !g.contains(h, r, t)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let t = sample_corrupt_tail(&g, h, r, &mut rng).unwrap();
            assert!(valid.contains(&t));
        }

        let single = unify(&inter("u\tit\n"), &RawTriples::default(), &[]).unwrap();
        // two entities (user, item); build a one-entity case by hand
        let mut one = single.clone();
        one.entities = IdMap::new();
        one.entities.get_or_insert("x");
        assert!(sample_corrupt_tail(&one, 0, 0, &mut rng).is_err());
    }

    #[test]
    fn corrupt_tail_only_candidate() {
        // Make every tail but one linked: a -r-> every entity except `free`.
        let mut text = String::new();
        for k in 0..30 {
            text.push_str(&format!("a\tr\tn{k}\n"));
        }
        text.push_str("free\ts\tfree2\n");
        let k = kg(&text);
        let i = inter("u\tn0\n");
        let g = unify(&i, &k, &[("n0".into(), "n0".into())]).unwrap();
        let a = k.entities.get("a").unwrap();
        let r = k.relations.get("r").unwrap();
        let valid: Vec<_> = (0..g.entity_count() as u32).filter(|&t| !g.contains(a, r, t)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            assert!(valid.contains(&sample_corrupt_tail(&g, a, r, &mut rng).unwrap()));
        }
    }

    #[test]
    fn negative_item_cases() {
        let i = inter("u\ti1\nu\ti2\nu\ti3\nv\ti4\n");
        let g = unify(&i, &RawTriples::default(), &[]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            assert_eq!(sample_negative_item(&g, 0, &mut rng).unwrap(), g.item_entity(3));
        }
        let full = inter("u\ti1\nu\ti2\n");
        let g = unify(&full, &RawTriples::default(), &[]).unwrap();
        assert!(sample_negative_item(&g, 0, &mut rng).is_err());
    }
}
