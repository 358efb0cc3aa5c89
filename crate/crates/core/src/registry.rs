//! Vocabularies shared across the pipeline: optimization action categories,
//! structural locus tags, platform capability levels and language families.
//!
//! All of them are open sets. The seeded contents describe the GPU kernel
//! domain; callers register more entries as they encounter them.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

/// One optimization action category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionInfo {
    pub id: String,
    #[serde(default)]
    pub description: String,
    /// Structural tag of the code surface the action usually touches.
    #[serde(default = "default_tag")]
    pub structural_tag: String,
    /// Soft ordering prior: actions that are normally applied before this one.
    #[serde(default)]
    pub requires: Vec<String>,
    /// Minimum platform capability, `None` for any platform.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub platform_min: Option<String>,
}

fn default_tag() -> String {
    "other".to_string()
}

impl ActionInfo {
    pub fn new(id: impl Into<String>, structural_tag: &str) -> Self {
        Self {
            id: id.into(),
            description: String::new(),
            structural_tag: structural_tag.to_string(),
            requires: Vec::new(),
            platform_min: None,
        }
    }

    pub fn describe(mut self, text: &str) -> Self {
        self.description = text.to_string();
        self
    }

    pub fn requires(mut self, ids: &[&str]) -> Self {
        self.requires = ids.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn platform_min(mut self, platform: &str) -> Self {
        self.platform_min = Some(platform.to_string());
        self
    }
}

/// Registry of known action categories.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ActionRegistry {
    actions: BTreeMap<String, ActionInfo>,
}

impl ActionRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// The kernel-domain vocabulary: staging and movement, compute and
    /// layout, expression-level actions, plus the GDN sub-kernel intents.
    pub fn seeded() -> Self {
        let mut reg = Self::default();
        let seed = [
            ActionInfo::new("tile", "loop_nest").describe("tile / shared-memory stage loops over output"),
            ActionInfo::new("vectorize_global", "global_memory_op")
                .describe("128-bit aligned vector loads and stores")
                .requires(&["tile"]),
            ActionInfo::new("cp_async_pipeline", "smem_stage")
                .describe("cp.async multi-stage software pipeline over staged tiles")
                .requires(&["tile"])
                .platform_min("nv-sm80"),
            ActionInfo::new("tma_load", "global_memory_op")
                .describe("TMA bulk loads through an encoded descriptor")
                .requires(&["tile"])
                .platform_min("nv-sm90"),
            ActionInfo::new("warp_specialize", "launch_config")
                .describe("producer/consumer warp specialization")
                .requires(&["tma_load"])
                .platform_min("nv-sm90"),
            ActionInfo::new("ldmatrix_swizzle", "smem_stage")
                .describe("ldmatrix with swizzled shared-memory layout for mma fragments")
                .requires(&["tile"])
                .platform_min("nv-sm80"),
            ActionInfo::new("mma_m16n8k16", "intrinsic_site")
                .describe("warp-level mma.sync m16n8k16 tensor-core tiles")
                .requires(&["tile"])
                .platform_min("nv-sm80"),
            ActionInfo::new("wgmma", "intrinsic_site")
                .describe("warpgroup mma on Hopper-class tiles")
                .requires(&["tile"])
                .platform_min("nv-sm90"),
            ActionInfo::new("smem_transpose", "smem_stage")
                .describe("transpose strided scan axis through shared memory"),
            ActionInfo::new("gemm_phase_decomposition", "loop_nest")
                .describe("restructure per-token work into cooperative GEMM phases"),
            ActionInfo::new("radix_select", "loop_nest").describe("coarse radix pass followed by refine pass"),
            ActionInfo::new("templatize", "tunable_slot").describe("lift constants into tunable template slots"),
            ActionInfo::new("autotune", "tunable_slot")
                .describe("sweep tunable slots")
                .requires(&["templatize"]),
            ActionInfo::new("vectorized_global_load_store", "global_memory_op"),
            ActionInfo::new("warp_shuffle_scan", "intrinsic_site"),
            ActionInfo::new("multi_threaded_block_parallelism", "launch_config"),
            ActionInfo::new("mma_ldmatrix_stmatrix_swizzle", "intrinsic_site"),
            ActionInfo::new("mma_ldmatrix_stmatrix_swizzle_tma", "intrinsic_site"),
            ActionInfo::new("l2_rasterization", "launch_config"),
            ActionInfo::new("warp_specialization", "launch_config"),
        ];
        for info in seed {
            reg.register(info);
        }
        reg
    }

    pub fn register(&mut self, info: ActionInfo) {
        self.actions.insert(info.id.clone(), info);
    }

    /// Registers a bare id if it is not already known.
    pub fn ensure(&mut self, id: &str, structural_tag: &str) {
        self.actions
            .entry(id.to_string())
            .or_insert_with(|| ActionInfo::new(id, structural_tag));
    }

    pub fn contains(&self, id: &str) -> bool {
        self.actions.contains_key(id)
    }

    pub fn get(&self, id: &str) -> Option<&ActionInfo> {
        self.actions.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ActionInfo> {
        self.actions.values()
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Soft partial order as (dependent, dependency) edges.
    pub fn soft_order(&self) -> SoftOrder {
        let mut order = SoftOrder::default();
        for info in self.actions.values() {
            for dep in &info.requires {
                order.add(&info.id, dep);
            }
        }
        order
    }
}

/// A soft partial order over actions: `requires[a]` are the actions that are
/// normally in place before `a`. Used only to rank proposals.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SoftOrder {
    requires: BTreeMap<String, BTreeSet<String>>,
}

impl SoftOrder {
    pub fn add(&mut self, dependent: &str, dependency: &str) {
        self.requires
            .entry(dependent.to_string())
            .or_default()
            .insert(dependency.to_string());
    }

    pub fn dependencies(&self, action: &str) -> impl Iterator<Item = &String> {
        self.requires.get(action).into_iter().flatten()
    }

    /// True when `dependent` (directly or transitively) requires `dependency`.
    pub fn depends_on(&self, dependent: &str, dependency: &str) -> bool {
        let mut stack = vec![dependent.to_string()];
        let mut seen = BTreeSet::new();
        while let Some(cur) = stack.pop() {
            if !seen.insert(cur.clone()) {
                continue;
            }
            for dep in self.dependencies(&cur) {
                if dep == dependency {
                    return true;
                }
                stack.push(dep.clone());
            }
        }
        false
    }
}

/// Structural locus tags. Open vocabulary; unknown tags may be registered.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagRegistry {
    tags: BTreeSet<String>,
}

pub const BUILTIN_TAGS: [&str; 7] = [
    "loop_nest",
    "global_memory_op",
    "smem_stage",
    "launch_config",
    "intrinsic_site",
    "tunable_slot",
    "other",
];

impl Default for TagRegistry {
    fn default() -> Self {
        Self {
            tags: BUILTIN_TAGS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl TagRegistry {
    pub fn register(&mut self, tag: &str) {
        self.tags.insert(tag.to_string());
    }

    pub fn contains(&self, tag: &str) -> bool {
        self.tags.contains(tag)
    }
}

/// Linear capability order per vendor family, plus lower-bound aliases.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlatformOrder {
    levels: BTreeMap<String, u32>,
    aliases: BTreeMap<String, String>,
}

impl Default for PlatformOrder {
    fn default() -> Self {
        let mut levels = BTreeMap::new();
        for (i, p) in ["sim", "nv-sm80", "nv-sm90", "nv-sm120"].iter().enumerate() {
            levels.insert(p.to_string(), i as u32);
        }
        let mut aliases = BTreeMap::new();
        aliases.insert("nv-a+".to_string(), "nv-sm80".to_string());
        aliases.insert("nv-h+".to_string(), "nv-sm90".to_string());
        aliases.insert("nv-hopper".to_string(), "nv-sm90".to_string());
        Self { levels, aliases }
    }
}

impl PlatformOrder {
    fn canonical<'a>(&'a self, platform: &'a str) -> String {
        let lower = platform.to_ascii_lowercase();
        self.aliases.get(&lower).cloned().unwrap_or(lower)
    }

    pub fn level(&self, platform: &str) -> Option<u32> {
        self.levels.get(&self.canonical(platform)).copied()
    }

    /// Whether a kernel running on `target` satisfies a skill verified or
    /// declared for `required`. Reflexive and transitive along the order;
    /// unknown platforms only match themselves.
    pub fn satisfies(&self, target: &str, required: &str) -> bool {
        if required == "*" {
            return true;
        }
        match (self.level(target), self.level(required)) {
            (Some(t), Some(r)) => t >= r,
            _ => self.canonical(target) == self.canonical(required),
        }
    }
}

/// Language-family similarity: exact match 1, registered neighbour 0.5.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LanguageFamilies {
    neighbours: BTreeSet<(String, String)>,
}

impl Default for LanguageFamilies {
    fn default() -> Self {
        let mut fams = Self {
            neighbours: BTreeSet::new(),
        };
        fams.link("cuda", "cpp");
        fams.link("triton", "tilelang");
        fams
    }
}

impl LanguageFamilies {
    pub fn link(&mut self, a: &str, b: &str) {
        self.neighbours.insert((a.to_string(), b.to_string()));
        self.neighbours.insert((b.to_string(), a.to_string()));
    }

    pub fn similarity(&self, a: &str, b: &str) -> f64 {
        if a == b {
            1.0
        } else if self.neighbours.contains(&(a.to_string(), b.to_string())) {
            0.5
        } else {
            0.0
        }
    }
}
