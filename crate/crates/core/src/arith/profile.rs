//! Cycle-cost profiles for the emulated platforms.
//!
//! A profile file is a list of `key = value` lines. `#` starts a comment.
//! An optional `base = <builtin name>` line selects the profile that unset
//! keys fall back to (default `atmega-like`).

use std::fs;
use std::path::Path;

use crate::error::Error;

/// Every constant is a cycle count and must be strictly positive. The two
/// `*_constant_time` flags switch a kernel to a single cost class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostProfile {
    pub name: String,

    pub float_mul_base: u32,
    pub float_mul_add: u32,
    pub float_mul_carry: u32,
    pub float_mul_normalize: u32,
    pub float_mul_round: u32,
    pub float_mul_zero: u32,

    pub float_add_base: u32,
    pub float_add_shift: u32,

    pub float_relu_pos: u32,
    pub float_relu_zero: u32,
    pub float_relu_neg: u32,

    pub int2float_base: u32,
    pub int2float_iter: u32,
    pub int2float_zero: u32,
    pub int2float_constant_time: bool,

    pub fixed_mac: u32,
    pub fixed_relu_pos: u32,
    pub fixed_relu_zero: u32,
    pub fixed_relu_neg: u32,

    pub div_base: u32,
    pub div_short: u32,
    pub div_long: u32,
    pub div_constant_time: bool,

    pub bnn_mac: u32,
    pub bnn_negate: u32,

    pub skip: u32,

    pub cmp_pos: u32,
    pub cmp_zero: u32,
    pub cmp_neg: u32,
    pub cmp_update: u32,

    pub ct_mul: u32,
    pub ct_mac: u32,
    pub ct_relu: u32,
    pub ct_cmp: u32,
}

pub const BUILTIN_PROFILES: [&str; 3] = ["atmega-like", "cortex-m0-like", "riscv-like"];

impl CostProfile {
    /// 8-bit AVR with software float. ReLU classes follow the measured ATmega
    /// column of the countermeasure table.
    pub fn atmega_like() -> Self {
        CostProfile {
            name: "atmega-like".into(),
            float_mul_base: 90,
            float_mul_add: 2,
            float_mul_carry: 1,
            float_mul_normalize: 5,
            float_mul_round: 3,
            float_mul_zero: 24,
            float_add_base: 40,
            float_add_shift: 3,
            float_relu_pos: 68,
            float_relu_zero: 56,
            float_relu_neg: 61,
            int2float_base: 40,
            int2float_iter: 9,
            int2float_zero: 22,
            int2float_constant_time: false,
            fixed_mac: 6,
            fixed_relu_pos: 10,
            fixed_relu_zero: 8,
            fixed_relu_neg: 7,
            div_base: 12,
            div_short: 9,
            div_long: 14,
            div_constant_time: false,
            bnn_mac: 5,
            bnn_negate: 2,
            skip: 3,
            cmp_pos: 30,
            cmp_zero: 24,
            cmp_neg: 27,
            cmp_update: 10,
            ct_mul: 48,
            ct_mac: 62,
            ct_relu: 9,
            ct_cmp: 20,
        }
    }

    /// Cortex-M0+-style core: hardware multiplier, CLZ-like conversion with a
    /// flat cost, restoring division still in software.
    pub fn cortex_m0_like() -> Self {
        CostProfile {
            name: "cortex-m0-like".into(),
            float_mul_base: 54,
            float_mul_add: 1,
            float_mul_carry: 1,
            float_mul_normalize: 4,
            float_mul_round: 2,
            float_mul_zero: 14,
            float_add_base: 28,
            float_add_shift: 2,
            float_relu_pos: 22,
            float_relu_zero: 17,
            float_relu_neg: 19,
            int2float_base: 26,
            int2float_iter: 1,
            int2float_zero: 26,
            int2float_constant_time: true,
            fixed_mac: 3,
            fixed_relu_pos: 6,
            fixed_relu_zero: 5,
            fixed_relu_neg: 4,
            div_base: 8,
            div_short: 5,
            div_long: 8,
            div_constant_time: false,
            bnn_mac: 3,
            bnn_negate: 1,
            skip: 2,
            cmp_pos: 16,
            cmp_zero: 10,
            cmp_neg: 13,
            cmp_update: 9,
            ct_mul: 20,
            ct_mac: 26,
            ct_relu: 4,
            ct_cmp: 9,
        }
    }

    /// RV32IM-style core: hardware divider and conversion are constant time.
    pub fn riscv_like() -> Self {
        CostProfile {
            name: "riscv-like".into(),
            float_mul_base: 40,
            float_mul_add: 1,
            float_mul_carry: 1,
            float_mul_normalize: 3,
            float_mul_round: 2,
            float_mul_zero: 10,
            float_add_base: 22,
            float_add_shift: 1,
            float_relu_pos: 14,
            float_relu_zero: 11,
            float_relu_neg: 12,
            int2float_base: 6,
            int2float_iter: 1,
            int2float_zero: 6,
            int2float_constant_time: true,
            fixed_mac: 2,
            fixed_relu_pos: 4,
            fixed_relu_zero: 3,
            fixed_relu_neg: 2,
            div_base: 4,
            div_short: 2,
            div_long: 2,
            div_constant_time: true,
            bnn_mac: 2,
            bnn_negate: 1,
            skip: 1,
            cmp_pos: 8,
            cmp_zero: 4,
            cmp_neg: 6,
            cmp_update: 7,
            ct_mul: 12,
            ct_mac: 16,
            ct_relu: 3,
            ct_cmp: 6,
        }
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "atmega-like" => Some(Self::atmega_like()),
            "cortex-m0-like" => Some(Self::cortex_m0_like()),
            "riscv-like" => Some(Self::riscv_like()),
            _ => None,
        }
    }

    /// Resolves a built-in name, or else a file path, or else
    /// `<dir>/<name>.profile` when a profile directory is given.
    pub fn resolve(name: &str, profile_dir: Option<&Path>) -> Result<Self, Error> {
        if let Some(p) = Self::builtin(name) {
            return Ok(p);
        }
        let direct = Path::new(name);
        if direct.is_file() {
            return Self::load(direct);
        }
        if let Some(dir) = profile_dir {
            let candidate = dir.join(format!("{name}.profile"));
            if candidate.is_file() {
                return Self::load(&candidate);
            }
        }
        Err(Error::Profile(format!("unknown profile '{name}'")))
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("custom");
        Self::parse(&text, stem)
    }

    pub fn parse(text: &str, default_name: &str) -> Result<Self, Error> {
        let mut entries = Vec::new();
        let mut base = Self::atmega_like();
        let mut name = default_name.to_string();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Profile(format!("line {}: expected key = value", no + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "base" => {
                    base = Self::builtin(v).ok_or_else(|| {
                        Error::Profile(format!("line {}: unknown base '{v}'", no + 1))
                    })?
                }
                "name" => name = v.to_string(),
                _ => entries.push((no + 1, k.to_string(), v.to_string())),
            }
        }
        let mut p = base;
        p.name = name;
        for (no, k, v) in entries {
            p.set(&k, &v)
                .map_err(|e| Error::Profile(format!("line {no}: {e}")))?;
        }
        p.validate()?;
        Ok(p)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        if let Some(slot) = self.flag_mut(key) {
            *slot = match value {
                "true" | "1" | "yes" => true,
                "false" | "0" | "no" => false,
                _ => return Err(format!("'{key}' expects a boolean, got '{value}'")),
            };
            return Ok(());
        }
        let slot = self
            .cost_mut(key)
            .ok_or_else(|| format!("unknown key '{key}'"))?;
        *slot = value
            .parse()
            .map_err(|_| format!("'{key}' expects a cycle count, got '{value}'"))?;
        Ok(())
    }

    fn flag_mut(&mut self, key: &str) -> Option<&mut bool> {
        Some(match key {
            "int2float_constant_time" => &mut self.int2float_constant_time,
            "div_constant_time" => &mut self.div_constant_time,
            _ => return None,
        })
    }

    fn cost_mut(&mut self, key: &str) -> Option<&mut u32> {
        Some(match key {
            "float_mul_base" => &mut self.float_mul_base,
            "float_mul_add" => &mut self.float_mul_add,
            "float_mul_carry" => &mut self.float_mul_carry,
            "float_mul_normalize" => &mut self.float_mul_normalize,
            "float_mul_round" => &mut self.float_mul_round,
            "float_mul_zero" => &mut self.float_mul_zero,
            "float_add_base" => &mut self.float_add_base,
            "float_add_shift" => &mut self.float_add_shift,
            "float_relu_pos" => &mut self.float_relu_pos,
            "float_relu_zero" => &mut self.float_relu_zero,
            "float_relu_neg" => &mut self.float_relu_neg,
            "int2float_base" => &mut self.int2float_base,
            "int2float_iter" => &mut self.int2float_iter,
            "int2float_zero" => &mut self.int2float_zero,
            "fixed_mac" => &mut self.fixed_mac,
            "fixed_relu_pos" => &mut self.fixed_relu_pos,
            "fixed_relu_zero" => &mut self.fixed_relu_zero,
            "fixed_relu_neg" => &mut self.fixed_relu_neg,
            "div_base" => &mut self.div_base,
            "div_short" => &mut self.div_short,
            "div_long" => &mut self.div_long,
            "bnn_mac" => &mut self.bnn_mac,
            "bnn_negate" => &mut self.bnn_negate,
            "skip" => &mut self.skip,
            "cmp_pos" => &mut self.cmp_pos,
            "cmp_zero" => &mut self.cmp_zero,
            "cmp_neg" => &mut self.cmp_neg,
            "cmp_update" => &mut self.cmp_update,
            "ct_mul" => &mut self.ct_mul,
            "ct_mac" => &mut self.ct_mac,
            "ct_relu" => &mut self.ct_relu,
            "ct_cmp" => &mut self.ct_cmp,
            _ => return None,
        })
    }

    /// Serializes every key so that `parse(to_text())` is the identity.
    pub fn to_text(&self) -> String {
        let mut out = format!("name = {}\n", self.name);
        let mut probe = self.clone();
        for key in COST_KEYS {
            let v = *probe.cost_mut(key).expect("known key");
            out.push_str(&format!("{key} = {v}\n"));
        }
        out.push_str(&format!(
            "int2float_constant_time = {}\n",
            self.int2float_constant_time
        ));
        out.push_str(&format!("div_constant_time = {}\n", self.div_constant_time));
        out
    }

    pub fn validate(&self) -> Result<(), Error> {
        let mut probe = self.clone();
        for key in COST_KEYS {
            if *probe.cost_mut(key).expect("known key") == 0 {
                return Err(Error::Profile(format!(
                    "{}: '{key}' must be positive",
                    self.name
                )));
            }
        }
        let relu = [
            self.float_relu_pos,
            self.float_relu_zero,
            self.float_relu_neg,
        ];
        let fixed = [
            self.fixed_relu_pos,
            self.fixed_relu_zero,
            self.fixed_relu_neg,
        ];
        let cmp = [self.cmp_pos, self.cmp_zero, self.cmp_neg];
        for (what, set) in [("float relu", relu), ("fixed relu", fixed), ("cmp", cmp)] {
            if set[0] == set[1] || set[1] == set[2] || set[0] == set[2] {
                return Err(Error::Profile(format!(
                    "{}: {what} classes must be distinct",
                    self.name
                )));
            }
        }
        let mut outcomes: Vec<u32> = cmp.iter().flat_map(|&c| [c, c + self.cmp_update]).collect();
        outcomes.sort_unstable();
        outcomes.dedup();
        if outcomes.len() != 6 {
            return Err(Error::Profile(format!(
                "{}: cmp outcomes with and without update must be distinct",
                self.name
            )));
        }
        Ok(())
    }
}

const COST_KEYS: [&str; 32] = [
    "float_mul_base",
    "float_mul_add",
    "float_mul_carry",
    "float_mul_normalize",
    "float_mul_round",
    "float_mul_zero",
    "float_add_base",
    "float_add_shift",
    "float_relu_pos",
    "float_relu_zero",
    "float_relu_neg",
    "int2float_base",
    "int2float_iter",
    "int2float_zero",
    "fixed_mac",
    "fixed_relu_pos",
    "fixed_relu_zero",
    "fixed_relu_neg",
    "div_base",
    "div_short",
    "div_long",
    "bnn_mac",
    "bnn_negate",
    "skip",
    "cmp_pos",
    "cmp_zero",
    "cmp_neg",
    "cmp_update",
    "ct_mul",
    "ct_mac",
    "ct_relu",
    "ct_cmp",
];

impl Default for CostProfile {
    fn default() -> Self {
        Self::atmega_like()
    }
}
