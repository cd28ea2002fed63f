//! Shared test machinery: a seeded random-kernel generator over the PTX
//! subset, and naive oracles the allocator and range checker are compared
//! against. Everything here is deterministic in the seed.

#![allow(dead_code)]

use std::fmt::Write;

/// SplitMix64: tiny, stable, and good enough for corpus generation.
pub struct Rng(u64);

impl Rng {
    pub fn new(seed: u64) -> Rng {
        Rng(seed)
    }

    pub fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }

    pub fn below(&mut self, n: u64) -> u64 {
        self.next() % n
    }

    pub fn range(&mut self, lo: u64, hi: u64) -> u64 {
        lo + self.below(hi - lo)
    }

    pub fn chance(&mut self, num: u64, den: u64) -> bool {
        self.below(den) < num
    }

    pub fn pick<'a, T>(&mut self, xs: &'a [T]) -> &'a T {
        &xs[self.below(xs.len() as u64) as usize]
    }
}

#[derive(Clone)]
pub struct GenOptions {
    /// Emit wild addresses and at least one guaranteed out-of-partition
    /// access.
    pub adversarial: bool,
    /// In-bounds accesses stay within `[buf, buf + buf_size)`; spans are
    /// kept at least 32 bytes clear of the end.
    pub buf_size: u64,
    pub max_ops: usize,
    pub allow_funcs: bool,
    pub allow_brx: bool,
    pub allow_loops: bool,
    pub allow_shared: bool,
    pub allow_atomics: bool,
    pub allow_vectors: bool,
    pub allow_predication: bool,
}

impl Default for GenOptions {
    fn default() -> Self {
        GenOptions {
            adversarial: false,
            buf_size: 65536,
            max_ops: 18,
            allow_funcs: true,
            allow_brx: true,
            allow_loops: true,
            allow_shared: true,
            allow_atomics: true,
            allow_vectors: true,
            allow_predication: true,
        }
    }
}

/// A generated module plus the generator's own static accounting, kept
/// independent of the implementation being tested.
pub struct GenKernel {
    pub text: String,
    pub name: String,
    pub direct_accesses: u32,
    pub offset_accesses: u32,
    pub brx_count: u32,
    pub shared_ops: u32,
    pub has_func: bool,
}

struct Gen {
    rng: Rng,
    opts: GenOptions,
    body: String,
    // Register pools holding initialized values.
    r32: Vec<u32>,
    r64: Vec<u32>,
    preds: Vec<u32>,
    next_r: u32,
    next_rd: u32,
    next_p: u32,
    next_label: u32,
    direct: u32,
    offset: u32,
    brx: u32,
    shared: u32,
    func_accesses: (u32, u32), // direct, offset inside the helper
    use_func: bool,
}

pub fn gen_module(seed: u64, opts: &GenOptions) -> GenKernel {
    let mut g = Gen {
        rng: Rng::new(seed),
        opts: opts.clone(),
        body: String::new(),
        r32: vec![],
        r64: vec![],
        preds: vec![],
        next_r: 1,
        next_rd: 1,
        next_p: 1,
        next_label: 0,
        direct: 0,
        offset: 0,
        brx: 0,
        shared: 0,
        func_accesses: (0, 0),
        use_func: false,
    };
    g.use_func = opts.allow_funcs && g.rng.chance(1, 4);
    g.generate()
}

impl Gen {
    fn fresh_r(&mut self) -> u32 {
        let r = self.next_r;
        self.next_r += 1;
        r
    }

    fn fresh_rd(&mut self) -> u32 {
        let r = self.next_rd;
        self.next_rd += 1;
        r
    }

    fn fresh_p(&mut self) -> u32 {
        let p = self.next_p;
        self.next_p += 1;
        p
    }

    fn fresh_label(&mut self) -> String {
        let l = self.next_label;
        self.next_label += 1;
        format!("L{l}")
    }

    fn pool_r(&mut self) -> u32 {
        *self.rng.pick(&self.r32.clone())
    }

    fn pool_rd(&mut self) -> u32 {
        *self.rng.pick(&self.r64.clone())
    }

    fn line(&mut self, s: &str) {
        let _ = writeln!(self.body, "\t{s}");
    }

    fn generate(mut self) -> GenKernel {
        // Prologue: parameters, thread identity, and a mixed 64-bit value.
        self.line("ld.param.u64 %rd1, [k_param_0];");
        self.line("ld.param.u32 %r1, [k_param_1];");
        self.line("cvta.to.global.u64 %rd2, %rd1;");
        self.line("mov.u32 %r2, %tid.x;");
        self.line("mov.u32 %r3, %ctaid.x;");
        self.line("mov.u32 %r4, %ntid.x;");
        self.line("mad.lo.s32 %r5, %r3, %r4, %r2;");
        self.line("xor.b32 %r6, %r5, %r1;");
        self.line("mul.wide.u32 %rd3, %r5, 2654435761;");
        self.line("cvt.u64.u32 %rd4, %r6;");
        self.next_r = 7;
        self.next_rd = 5;
        self.r32 = vec![1, 2, 3, 4, 5, 6];
        self.r64 = vec![3, 4];

        let op_count = self.rng.range(4, self.opts.max_ops as u64 + 1) as usize;
        for _ in 0..op_count {
            self.emit_random_op(true);
        }
        if self.opts.adversarial {
            // One guaranteed out-of-partition store, unconditional.
            let rd = self.fresh_rd();
            self.line(&format!("add.u64 %rd{rd}, %rd2, 1073741824;"));
            self.line(&format!("st.global.u32 [%rd{rd}], %r2;"));
            self.direct += 1;
        }
        self.line("ret;");

        let mut text = String::new();
        text.push_str(".version 7.7\n.target sm_86\n.address_size 64\n");
        if self.use_func {
            // The helper stores through its pointer argument twice, once
            // directly and once at an offset.
            text.push_str(
                "\n.func helper(\n\t.param .u64 helper_p0,\n\t.param .u32 helper_p1\n)\n{\n\
                 \t.reg .b32 %hr<3>;\n\t.reg .b64 %hrd<3>;\n\
                 \tld.param.u64 %hrd1, [helper_p0];\n\tld.param.u32 %hr1, [helper_p1];\n\
                 \tst.global.u32 [%hrd1], %hr1;\n\tst.global.u32 [%hrd1+16], %hr1;\n\tret;\n}\n",
            );
            self.func_accesses = (1, 1);
        }
        text.push_str(
            "\n.visible .entry k(\n\t.param .u64 k_param_0,\n\t.param .u32 k_param_1\n)\n{\n",
        );
        let _ = writeln!(text, "\t.reg .b32 %r<{}>;", self.next_r.max(8));
        let _ = writeln!(text, "\t.reg .b64 %rd<{}>;", self.next_rd.max(8));
        let _ = writeln!(text, "\t.reg .pred %p<{}>;", self.next_p.max(2));
        text.push_str(&self.body);
        text.push_str("}\n");

        GenKernel {
            text,
            name: "k".into(),
            direct_accesses: self.direct + self.func_accesses.0,
            offset_accesses: self.offset + self.func_accesses.1,
            brx_count: self.brx,
            shared_ops: self.shared,
            has_func: self.use_func,
        }
    }

    fn emit_random_op(&mut self, allow_structured: bool) {
        let roll = self.rng.below(100);
        match roll {
            0..=29 => self.emit_alu(),
            30..=37 => self.emit_setp_selp(),
            38..=75 => self.emit_memory_access(),
            76..=83 => {
                if self.opts.allow_loops && allow_structured {
                    self.emit_loop();
                } else {
                    self.emit_alu();
                }
            }
            84..=90 => {
                if self.opts.allow_brx && allow_structured {
                    self.emit_brx();
                } else {
                    self.emit_memory_access();
                }
            }
            91..=95 => {
                if self.use_func {
                    self.emit_call();
                } else {
                    self.emit_memory_access();
                }
            }
            _ => {
                if self.opts.allow_shared {
                    self.emit_shared_op();
                } else {
                    self.emit_alu();
                }
            }
        }
    }

    fn emit_alu(&mut self) {
        if self.rng.chance(1, 2) {
            let a = self.pool_r();
            let d = self.fresh_r();
            let op = *self.rng.pick(&[
                "add.u32",
                "sub.u32",
                "mul.lo.u32",
                "and.b32",
                "or.b32",
                "xor.b32",
                "min.u32",
                "max.u32",
            ]);
            if self.rng.chance(1, 3) {
                let imm = self.rng.below(1 << 20);
                self.line(&format!("{op} %r{d}, %r{a}, {imm};"));
            } else {
                let b = self.pool_r();
                self.line(&format!("{op} %r{d}, %r{a}, %r{b};"));
            }
            self.r32.push(d);
        } else {
            let a = self.pool_rd();
            let d = self.fresh_rd();
            match self.rng.below(4) {
                0 => {
                    let amt = self.rng.below(24);
                    self.line(&format!("shl.b64 %rd{d}, %rd{a}, {amt};"));
                }
                1 => {
                    let amt = self.rng.below(32);
                    self.line(&format!("shr.u64 %rd{d}, %rd{a}, {amt};"));
                }
                2 => {
                    let b = self.pool_rd();
                    self.line(&format!("add.u64 %rd{d}, %rd{a}, %rd{b};"));
                }
                _ => {
                    let b = self.pool_rd();
                    self.line(&format!("xor.b64 %rd{d}, %rd{a}, %rd{b};"));
                }
            }
            self.r64.push(d);
        }
    }

    fn emit_setp_selp(&mut self) {
        let a = self.pool_r();
        let b = self.pool_r();
        let p = self.fresh_p();
        let cmp = *self.rng.pick(&["eq", "ne", "lt", "le", "gt", "ge"]);
        self.line(&format!("setp.{cmp}.u32 %p{p}, %r{a}, %r{b};"));
        self.preds.push(p);
        if self.rng.chance(1, 2) {
            let d = self.fresh_r();
            let x = self.pool_r();
            let y = self.pool_r();
            self.line(&format!("selp.b32 %r{d}, %r{x}, %r{y}, %p{p};"));
            self.r32.push(d);
        }
    }

    /// Builds an address register holding `buf + masked_offset` (in-bounds)
    /// or something wild (adversarial), then emits one access through it.
    fn emit_memory_access(&mut self) {
        let wild = self.opts.adversarial && self.rng.chance(1, 2);
        let addr = self.make_address(wild);
        self.emit_access_through(addr, true);
    }

    /// In-bounds offsets are masked to half the buffer so positive literal
    /// offsets and vector spans stay interior.
    fn make_address(&mut self, wild: bool) -> u32 {
        let mix = self.pool_rd();
        let off = self.fresh_rd();
        let addr = self.fresh_rd();
        if wild {
            match self.rng.below(3) {
                0 => {
                    // Absolute low address, outside any partition.
                    let a = self.rng.below(1 << 30);
                    self.line(&format!("mov.u64 %rd{addr}, {a};"));
                }
                1 => {
                    // Far past the buffer.
                    let delta = (1u64 << 28) + self.rng.below(1 << 33);
                    self.line(&format!("add.u64 %rd{off}, %rd2, {delta};"));
                    self.line(&format!("add.u64 %rd{addr}, %rd{off}, %rd{mix};"));
                }
                _ => {
                    // Bit salad.
                    let salt = self.rng.next() >> 1;
                    self.line(&format!("xor.b64 %rd{off}, %rd{mix}, {salt};"));
                    self.line(&format!("add.u64 %rd{addr}, %rd2, %rd{off};"));
                }
            }
        } else {
            let mask = (self.opts.buf_size / 2 - 1) & !7;
            self.line(&format!("and.b64 %rd{off}, %rd{mix}, {mask};"));
            self.line(&format!("add.u64 %rd{addr}, %rd2, %rd{off};"));
        }
        self.r64.push(addr);
        addr
    }

    fn emit_access_through(&mut self, addr: u32, allow_pred: bool) {
        // Positive literal offsets keep in-bounds spans interior.
        let use_offset = self.rng.chance(2, 5);
        let lit = if use_offset {
            if self.opts.adversarial && self.rng.chance(1, 4) {
                -(self.rng.below(1 << 16) as i64)
            } else {
                self.rng.below(self.opts.buf_size / 2 - 32) as i64
            }
        } else {
            0
        };
        let suffix = match lit {
            0 => String::new(),
            n if n > 0 => format!("+{n}"),
            n => n.to_string(),
        };
        if lit == 0 {
            self.direct += 1;
        } else {
            self.offset += 1;
        }

        let guard = if allow_pred
            && self.opts.allow_predication
            && !self.preds.is_empty()
            && self.rng.chance(1, 5)
        {
            let p = *self.rng.pick(&self.preds.clone());
            let neg = if self.rng.chance(1, 3) { "!" } else { "" };
            format!("@{neg}%p{p} ")
        } else {
            String::new()
        };

        let space = if self.rng.chance(1, 6) { "" } else { ".global" };
        let space = if self.rng.chance(1, 10) {
            ".local"
        } else {
            space
        };

        match self.rng.below(10) {
            0..=2 => {
                let d = self.fresh_r();
                self.line(&format!("{guard}ld{space}.u32 %r{d}, [%rd{addr}{suffix}];"));
                self.r32.push(d);
            }
            3..=4 => {
                let d = self.fresh_rd();
                self.line(&format!(
                    "{guard}ld{space}.u64 %rd{d}, [%rd{addr}{suffix}];"
                ));
                self.r64.push(d);
            }
            5..=6 => {
                let s = self.pool_r();
                self.line(&format!("{guard}st{space}.u32 [%rd{addr}{suffix}], %r{s};"));
            }
            7 => {
                let s = self.pool_rd();
                self.line(&format!(
                    "{guard}st{space}.u64 [%rd{addr}{suffix}], %rd{s};"
                ));
            }
            8 => {
                if self.opts.allow_vectors {
                    let a = self.fresh_r();
                    let b = self.fresh_r();
                    self.line(&format!(
                        "{guard}ld{space}.v2.u32 {{%r{a}, %r{b}}}, [%rd{addr}{suffix}];"
                    ));
                    self.r32.push(a);
                    self.r32.push(b);
                } else {
                    let s = self.pool_r();
                    self.line(&format!("{guard}st{space}.u32 [%rd{addr}{suffix}], %r{s};"));
                }
            }
            _ => {
                if self.opts.allow_atomics {
                    let d = self.fresh_r();
                    let s = self.pool_r();
                    let op = *self
                        .rng
                        .pick(&["add", "min", "max", "and", "or", "xor", "exch"]);
                    if self.rng.chance(1, 3) {
                        self.line(&format!(
                            "{guard}red{space}.add.u32 [%rd{addr}{suffix}], %r{s};"
                        ));
                    } else {
                        self.line(&format!(
                            "{guard}atom{space}.{op}.u32 %r{d}, [%rd{addr}{suffix}], %r{s};"
                        ));
                        self.r32.push(d);
                    }
                } else {
                    let s = self.pool_r();
                    self.line(&format!("{guard}st{space}.u32 [%rd{addr}{suffix}], %r{s};"));
                }
            }
        }
    }

    fn emit_shared_op(&mut self) {
        let addr = self.pool_rd();
        if self.rng.chance(1, 2) {
            let d = self.fresh_r();
            self.line(&format!("ld.shared.u32 %r{d}, [%rd{addr}];"));
            self.r32.push(d);
        } else {
            let s = self.pool_r();
            self.line(&format!("st.shared.u32 [%rd{addr}], %r{s};"));
        }
        self.shared += 1;
    }

    fn emit_loop(&mut self) {
        let counter = self.fresh_r();
        let p = self.fresh_p();
        let label = self.fresh_label();
        let iters = self.rng.range(2, 5);
        self.line(&format!("mov.u32 %r{counter}, 0;"));
        let _ = writeln!(self.body, "{label}:");
        let inner = self.rng.range(1, 3);
        for _ in 0..inner {
            self.emit_random_op(false);
        }
        self.line(&format!("add.u32 %r{counter}, %r{counter}, 1;"));
        self.line(&format!("setp.lt.u32 %p{p}, %r{counter}, {iters};"));
        self.line(&format!("@%p{p} bra {label};"));
    }

    fn emit_brx(&mut self) {
        let n = self.rng.range(2, 4) as usize;
        let idx_src = self.pool_r();
        let idx = self.fresh_r();
        let labels: Vec<String> = (0..n).map(|_| self.fresh_label()).collect();
        let done = self.fresh_label();
        if !self.opts.adversarial {
            // Keep the index valid so the unsandboxed run has defined
            // behavior; the sandbox's own clamp is then an identity.
            self.line(&format!("rem.u32 %r{idx}, %r{idx_src}, {n};"));
        } else {
            let big = self.rng.below(1 << 20) + n as u64;
            self.line(&format!("add.u32 %r{idx}, %r{idx_src}, {big};"));
        }
        self.line(&format!("brx.idx %r{idx}, {{{}}};", labels.join(", ")));
        self.brx += 1;
        for l in &labels {
            let _ = writeln!(self.body, "{l}:");
            self.emit_alu();
            self.line(&format!("bra {done};"));
        }
        let _ = writeln!(self.body, "{done}:");
    }

    fn emit_call(&mut self) {
        let wild = self.opts.adversarial && self.rng.chance(1, 2);
        let addr = self.make_address(wild);
        let v = self.pool_r();
        self.line(&format!("call.uni helper, (%rd{addr}, %r{v});"));
    }
}

// ---------------------------------------------------------------------------
// Oracles.
// ---------------------------------------------------------------------------

/// Byte-granular membership oracle for transfer validation: walks every
/// byte of the range instead of doing interval arithmetic.
pub fn range_in_partition_bruteforce(base: u64, size: u64, addr: u64, len: u64) -> bool {
    if len == 0 {
        return addr >= base && addr <= base.wrapping_add(size);
    }
    let mut a = addr;
    for _ in 0..len {
        if a < base || a >= base + size {
            return false;
        }
        let Some(next) = a.checked_add(1) else {
            return false;
        };
        // The final increment may legitimately reach base+size.
        if next > base + size {
            return false;
        }
        a = next;
    }
    true
}

/// First-fit bitmap allocator over 256-byte granules, the oracle for the
/// partition sub-allocator.
pub struct BitmapAlloc {
    base: u64,
    granules: Vec<bool>,
    live: std::collections::HashMap<u64, u64>,
}

impl BitmapAlloc {
    pub fn new(base: u64, size: u64) -> BitmapAlloc {
        BitmapAlloc {
            base,
            granules: vec![false; (size / 256) as usize],
            live: Default::default(),
        }
    }

    pub fn malloc(&mut self, size: u64) -> Option<u64> {
        if size == 0 {
            return None;
        }
        let need = size.div_ceil(256) as usize;
        let mut run = 0usize;
        for i in 0..self.granules.len() {
            if self.granules[i] {
                run = 0;
            } else {
                run += 1;
                if run == need {
                    let start = i + 1 - need;
                    for g in &mut self.granules[start..=i] {
                        *g = true;
                    }
                    let addr = self.base + (start as u64) * 256;
                    self.live.insert(addr, need as u64);
                    return Some(addr);
                }
            }
        }
        None
    }

    pub fn free(&mut self, addr: u64) -> bool {
        let Some(need) = self.live.remove(&addr) else {
            return false;
        };
        let start = ((addr - self.base) / 256) as usize;
        for g in &mut self.granules[start..start + need as usize] {
            *g = false;
        }
        true
    }

    pub fn live_addrs(&self) -> Vec<u64> {
        let mut v: Vec<u64> = self.live.keys().copied().collect();
        v.sort_unstable();
        v
    }
}

/// Whether a device bitmap has any free size-aligned run of `size` bytes:
/// the success oracle for partition placement.
pub fn aligned_run_exists(free: &[bool], granule: u64, size: u64) -> bool {
    let need = (size / granule) as usize;
    let mut i = 0;
    while i + need <= free.len() {
        if free[i..i + need].iter().all(|f| *f) {
            return true;
        }
        i += need;
    }
    false
}
