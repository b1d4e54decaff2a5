//! Seeded synthetic corpora for sanity checks and directional experiments.
//!
//! Each variable's type is decided either by its data layout (code around it
//! is uninformative) or by a code cue (layout shared with other cue types).
//! Names are drawn from a small per-type pool, so names and types correlate.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::raw::{RawFunction, RawVariable};
use crate::typelib::{DataLayout, Location};

struct SynType {
    canonical: &'static str,
    size: u64,
    offsets: &'static [u64],
    decompiler_type: &'static str,
    names: &'static [&'static str],
    /// Statements that reveal the type; empty for layout-decided types.
    cues: &'static [&'static str],
}

const TYPES: [SynType; 8] = [
    SynType {
        canonical: "char",
        size: 1,
        offsets: &[0],
        decompiler_type: "char",
        names: &["c", "ch"],
        cues: &[],
    },
    SynType {
        canonical: "short",
        size: 2,
        offsets: &[0],
        decompiler_type: "__int16",
        names: &["port", "flags"],
        cues: &[],
    },
    SynType {
        canonical: "int",
        size: 4,
        offsets: &[0],
        decompiler_type: "int",
        names: &["i", "n", "count"],
        cues: &[],
    },
    SynType {
        canonical: "struct point { int x @0; int y @4; }",
        size: 8,
        offsets: &[0, 4],
        decompiler_type: "__int64",
        names: &["pt", "pos"],
        cues: &[],
    },
    SynType {
        canonical: "struct pair { __int64 first @0; __int64 second @8; }",
        size: 16,
        offsets: &[0, 8],
        decompiler_type: "__int128",
        names: &["range", "span"],
        cues: &[],
    },
    SynType {
        canonical: "char[16]",
        size: 16,
        offsets: &[0],
        decompiler_type: "__int128",
        names: &["buf", "name"],
        cues: &[],
    },
    SynType {
        canonical: "struct _IO_FILE *",
        size: 8,
        offsets: &[0],
        decompiler_type: "__int64",
        names: &["fp", "stream", "file"],
        cues: &["{v} = fopen ( \"a\" , \"r\" ) ;", "fclose ( {v} ) ;", "fgets ( buf , 16 , {v} ) ;"],
    },
    SynType {
        canonical: "char *",
        size: 8,
        offsets: &[0],
        decompiler_type: "__int64",
        names: &["str", "path", "msg"],
        cues: &["{v} = strdup ( \"x\" ) ;", "len = strlen ( {v} ) ;", "puts ( {v} ) ;"],
    },
];

/// Name used when a variable's name is noise rather than type-driven.
pub const NOISE_NAME: &str = "tmp";

const GENERIC: [&str; 5] = [
    "sub_401000 ( {v} ) ;",
    "if ( {v} ) return ;",
    "memset ( & {v} , 0 , sizeof ( {v} ) ) ;",
    "sub_402000 ( & {v} , 1 ) ;",
    "{v} = sub_403000 ( ) ;",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticConfig {
    pub functions: usize,
    pub functions_per_binary: usize,
    pub min_vars: usize,
    pub max_vars: usize,
    /// Probability that a variable's type is decided by its layout.
    pub layout_fraction: f64,
    /// Probability that a name is [`NOISE_NAME`] instead of a type-pool name.
    pub name_noise: f64,
    /// Add a per-name usage statement so names are recoverable from code.
    pub name_cues: bool,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            functions: 400,
            functions_per_binary: 5,
            min_vars: 2,
            max_vars: 5,
            layout_fraction: 0.8,
            name_noise: 0.05,
            name_cues: false,
            seed: 0,
        }
    }
}

/// Canonical strings of every type the generators can emit.
pub fn type_names() -> Vec<&'static str> {
    TYPES.iter().map(|t| t.canonical).collect()
}

/// Every name the generators can emit, noise name included.
pub fn name_pool() -> Vec<&'static str> {
    let mut v: Vec<&str> = TYPES.iter().flat_map(|t| t.names.iter().copied()).collect();
    v.push(NOISE_NAME);
    v
}

pub fn generate(cfg: &SyntheticConfig) -> Vec<RawFunction> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let layout_types: Vec<&SynType> = TYPES.iter().filter(|t| t.cues.is_empty()).collect();
    let cue_types: Vec<&SynType> = TYPES.iter().filter(|t| !t.cues.is_empty()).collect();
    (0..cfg.functions)
        .map(|fi| {
            let m = rng.random_range(cfg.min_vars..=cfg.max_vars);
            let mut offsets: Vec<i64> = (1..=32).map(|k| 8 * k).collect();
            let mut tokens: Vec<String> = format!("__int64 __fastcall sub_{:x} ( ) {{", 0x410000 + 0x40 * fi)
                .split(' ')
                .map(String::from)
                .collect();
            let mut variables = Vec::with_capacity(m);
            let mut statements: Vec<(usize, String)> = Vec::new();
            for k in 0..m {
                let ty = if rng.random_bool(cfg.layout_fraction) {
                    *layout_types.choose(&mut rng).expect("non-empty")
                } else {
                    *cue_types.choose(&mut rng).expect("non-empty")
                };
                let name = if rng.random_bool(cfg.name_noise) {
                    NOISE_NAME
                } else {
                    ty.names.choose(&mut rng).expect("non-empty")
                };
                let slot = rng.random_range(0..offsets.len());
                let off = offsets.swap_remove(slot);
                let template = if ty.cues.is_empty() {
                    GENERIC.choose(&mut rng).expect("non-empty")
                } else {
                    ty.cues.choose(&mut rng).expect("non-empty")
                };
                statements.push((k, template.to_string()));
                statements.push((k, GENERIC.choose(&mut rng).expect("non-empty").to_string()));
                if cfg.name_cues {
                    statements.push((k, format!("log_{name} ( {{v}} ) ;")));
                }
                variables.push(RawVariable {
                    decompiler_name: format!("v{}", k + 1),
                    occurrences: Vec::new(),
                    layout: DataLayout {
                        location: Location::Stack(off),
                        size: ty.size,
                        offsets: ty.offsets.to_vec(),
                    },
                    decompiler_type: Some(ty.decompiler_type.to_string()),
                    gold_type: Some(ty.canonical.to_string()),
                    gold_name: Some(name.to_string()),
                });
            }
            // Interleave statements so variables are not in declaration order.
            for i in (1..statements.len()).rev() {
                let j = rng.random_range(0..=i);
                statements.swap(i, j);
            }
            for (k, stmt) in statements {
                let vname = variables[k].decompiler_name.clone();
                for piece in stmt.split(' ') {
                    if piece == "{v}" {
                        variables[k].occurrences.push(tokens.len());
                        tokens.push(vname.clone());
                    } else {
                        tokens.push(piece.to_string());
                    }
                }
            }
            tokens.push("}".into());
            RawFunction {
                binary_id: format!("bin{:03}", fi / cfg.functions_per_binary.max(1)),
                function_id: format!("sub_{:x}", 0x410000 + 0x40 * fi),
                opt_level: None,
                tokens,
                variables,
            }
        })
        .collect()
}

/// Small corpus whose names and types are both recoverable from the input.
pub fn toy_corpus(functions: usize, seed: u64) -> Vec<RawFunction> {
    generate(&SyntheticConfig {
        functions,
        name_cues: true,
        min_vars: 2,
        max_vars: 4,
        seed,
        ..SyntheticConfig::default()
    })
}
