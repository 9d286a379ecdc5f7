//! Built-in experiment configs. Each is an ordinary TOML config and can be
//! dumped with `rds-lab presets --show <name>` as a starting point.

use crate::config::ExperimentConfig;
use crate::{LabError, Result};

pub struct Preset {
    pub name: &'static str,
    pub description: &'static str,
    pub toml: &'static str,
}

macro_rules! preset {
    ($name:expr, $desc:expr, $base:expr, $body:expr) => {
        Preset { name: $name, description: $desc, toml: concat!($body, $base) }
    };
}

// `concat!` needs literals, hence macros for the shared base tables.
macro_rules! doubling {
    () => {
        r#"
[base]
process = "iid"
symbols = ["b2"]
weights = [1.0]

[maps.b2]
family = "beta"
beta = 2
"#
    };
}

macro_rules! random_beta {
    () => {
        r#"
[base]
process = "iid"
symbols = ["b2", "b3"]
weights = [0.5, 0.5]

[maps.b2]
family = "beta"
beta = 2

[maps.b3]
family = "beta"
beta = 3
"#
    };
}

static PRESETS: &[Preset] = &[
    preset!(
        "doubling-clt",
        "Doubling map, v = cos 2πx: KS distance of n^{-1/2} S_n to Normal(0, 1/2)",
        doubling!(),
        r#"
scenario = "clt"
description = "doubling map, cos 2πx"
master_seed = 11

[observable]
name = "cos_2pi"

[numerics]
n_bins = 4096
positions = 16
n = 10000
n_paths = 5000

[oracle]
sigma = [[0.5]]
e = [[0.0]]

[tolerances]
ks = 0.035
"#
    ),
    preset!(
        "doubling-clt-linear",
        "Doubling map, v = x - 1/2: KS distance of n^{-1/2} S_n to Normal(0, 1/4)",
        doubling!(),
        r#"
scenario = "clt"
description = "doubling map, x - 1/2"
master_seed = 12

[observable]
name = "x_minus_half"

[numerics]
n_bins = 4096
positions = 16
n = 10000
n_paths = 5000

[oracle]
sigma = [[0.25]]
e = [[0.0833333333333333333]]

[tolerances]
ks = 0.035
"#
    ),
    preset!(
        "doubling-wip",
        "Doubling map, v = x - 1/2: mean of the iterated integral at t = 1 against E = 1/12",
        doubling!(),
        r#"
scenario = "iterated_wip"
description = "doubling map, x - 1/2"
master_seed = 21

[observable]
name = "x_minus_half"

[numerics]
n_bins = 4096
positions = 16
n = 10000
n_paths = 10000

[oracle]
sigma = [[0.25]]
e = [[0.0833333333333333333]]
"#
    ),
    preset!(
        "doubling-wip-cos",
        "Doubling map, v = cos 2πx: mean of the iterated integral at t = 1 against E = 0",
        doubling!(),
        r#"
scenario = "iterated_wip"
description = "doubling map, cos 2πx"
master_seed = 22

[observable]
name = "cos_2pi"

[numerics]
n_bins = 4096
positions = 16
n = 10000
n_paths = 10000

[oracle]
sigma = [[0.5]]
e = [[0.0]]
"#
    ),
    preset!(
        "doubling-wip-pair",
        "Doubling map, v = (x - 1/2, cos 2πx): iterated integral with cross terms and the pairing identity",
        doubling!(),
        r#"
scenario = "iterated_wip"
description = "doubling map, two components"
master_seed = 23

[observable]
name = "x_minus_half_cos_2pi"

[numerics]
n_bins = 4096
positions = 16
n = 10000
n_paths = 2000
pairing_paths = 1000

[oracle]
sigma = [[0.25, 0.0], [0.0, 0.5]]
e = [[0.0833333333333333333, 0.0], [0.0, 0.0]]
"#
    ),
    preset!(
        "doubling-lil",
        "Doubling map, v = x - 1/2: law of the iterated logarithm envelope up to n = 10^5",
        doubling!(),
        r#"
scenario = "lil"
description = "doubling map, x - 1/2"
master_seed = 31

[observable]
name = "x_minus_half"

[numerics]
n_bins = 1024
positions = 16
n = 100000
n_paths = 400

[oracle]
sigma = [[0.25]]
"#
    ),
    preset!(
        "doubling-moments",
        "Doubling map, v = x - 1/2: growth of maximal moments of sums and iterated sums",
        doubling!(),
        r#"
scenario = "moments"
description = "doubling map, x - 1/2"
master_seed = 41

[observable]
name = "x_minus_half"

[numerics]
n_bins = 1024
positions = 16
n = 10000
n_paths = 2000
moment_p = 4
moment_grid = [1000, 3162, 10000]
"#
    ),
    preset!(
        "homogenization-doubling",
        "dx = ε a dt + b(x) v dt with a = 0, b = sin x + 2 over doubling, v = x - 1/2, against the corrected SDE",
        doubling!(),
        r#"
scenario = "homogenization"
description = "fast-slow over doubling, x - 1/2"
master_seed = 51

[observable]
name = "x_minus_half"

[numerics]
n_bins = 1024
positions = 16
n_paths = 2000
epsilon = 0.05

[oracle]
sigma = [[0.25]]
e = [[0.0833333333333333333]]

[fast_slow]
xi = [0.0]
a = [{ kind = "affine", constant = 0.0, linear = [0.0] }]
b = [[{ kind = "sin", var = 0, amp = 1.0, freq = 1.0, phase = 0.0, offset = 2.0 }]]
"#
    ),
    preset!(
        "homogenization-doubling-cos",
        "Fast-slow system over doubling with v = cos 2πx (E = 0), against the SDE with uncorrected drift",
        doubling!(),
        r#"
scenario = "homogenization"
description = "fast-slow over doubling, cos 2πx"
master_seed = 52

[observable]
name = "cos_2pi"

[numerics]
n_bins = 1024
positions = 16
n_paths = 2000
epsilon = 0.05

[oracle]
sigma = [[0.5]]
e = [[0.0]]

[fast_slow]
xi = [0.0]
corrected = false
a = [{ kind = "affine", constant = 0.0, linear = [0.0] }]
b = [[{ kind = "sin", var = 0, amp = 1.0, freq = 1.0, phase = 0.0, offset = 2.0 }]]
"#
    ),
    preset!(
        "random-beta-decay",
        "I.i.d. β ∈ {2, 3}: geometric decay rate of transfer-operator correlations for x - 1/2",
        random_beta!(),
        r#"
scenario = "decay"
description = "random beta maps"
master_seed = 61

[observable]
name = "x_minus_half"

[numerics]
n_bins = 4096
truncation_k = 40
positions = 64
decay_steps = 40

[tolerances]
decay_rate_max = 0.55
"#
    ),
    preset!(
        "random-beta-decomposition",
        "I.i.d. β ∈ {2, 3}, N = 4096, k = 40: martingale-coboundary decomposition of x - 1/2",
        random_beta!(),
        r#"
scenario = "decomposition"
description = "random beta maps"
master_seed = 62

[observable]
name = "x_minus_half"

[numerics]
n_bins = 4096
truncation_k = 40
positions = 64
"#
    ),
    preset!(
        "conditions-iid",
        "Condition checkers: expansion constants, B(s), ψ_U and the mixing criterion for an i.i.d. base",
        random_beta!(),
        r#"
scenario = "conditions"
description = "condition checkers"
master_seed = 71

[observable]
name = "x_minus_half"

[numerics]
n_bins = 1024
truncation_k = 40
positions = 16

[conditions]
rho = [0.5, 0.5]
k_max = 20
a_omega_probe = [1, 1.2, 4, 2.0, 1.0]
expect_a_omega = 0.675
b_probe = 0.5
expect_b = 7500.0
"#
    ),
    preset!(
        "doubling-coboundary",
        "Doubling map, v = q - q∘T with q = x(1 - x): the asymptotic covariance must vanish",
        doubling!(),
        r#"
scenario = "decomposition"
description = "coboundary observable"
master_seed = 81

[observable]
name = "coboundary_x_one_minus_x"

[numerics]
n_bins = 4096
positions = 16

[oracle]
sigma = [[0.0]]
degenerate = true
"#
    ),
    preset!(
        "markov-mixed",
        "Markov base over a Lasota-Yorke map and a curved mixed map: decomposition with non-uniform densities",
        r#"
[base]
process = "markov"
symbols = ["ly", "mx"]
transition = [[0.7, 0.3], [0.4, 0.6]]

[maps.ly]
family = "lasota_yorke"
breakpoints = [0.0, 0.4, 1.0]
slopes = [2.5, -1.6666666666666667]

[maps.mx]
family = "mixed"
d = 3
q = 1
eta = 3.0
curvature = 0.5
"#,
        r#"
scenario = "decomposition"
description = "markov base, non-uniform densities"
master_seed = 91

[observable]
name = "x_sin_2pi"

[numerics]
n_bins = 4096
truncation_k = 40
positions = 64
"#
    ),
];

pub fn list() -> &'static [Preset] {
    PRESETS
}

pub fn names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|p| p.name)
}

pub fn find(name: &str) -> Result<&'static Preset> {
    PRESETS.iter().find(|p| p.name == name).ok_or_else(|| LabError::UnknownPreset(name.into()))
}

pub fn load(name: &str) -> Result<ExperimentConfig> {
    ExperimentConfig::from_toml(find(name)?.toml)
}
