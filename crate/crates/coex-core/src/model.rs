//! Data model shared by every other module: child networks, FPGA pools,
//! search spaces, and the shape / MAC / parameter accounting on which the
//! performance model and the accuracy surrogate are built.

use serde::{Deserialize, Serialize};
use std::fmt;

/// Errors raised by model-level validation and accounting.
#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ModelError {
    /// A spatial dimension or channel count reached zero.
    #[error("shape underflow at layer {layer}: {height}x{width}x{channels}")]
    ShapeUnderflow {
        layer: usize,
        height: u32,
        width: u32,
        channels: u32,
    },
    /// A network or layer violates a structural invariant.
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
    /// A search-space definition violates a structural invariant.
    #[error("invalid search space: {0}")]
    InvalidSpace(String),
}

/// Height x width x channels of an activation tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorShape {
    pub height: u32,
    pub width: u32,
    pub channels: u32,
}

impl TensorShape {
    pub fn new(height: u32, width: u32, channels: u32) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    /// Number of elements in the tensor.
    pub fn elements(&self) -> u64 {
        self.height as u64 * self.width as u64 * self.channels as u64
    }
}

/// Layer family. `Conv` is a standard convolution; `MBConv` is an inverted
/// bottleneck (pointwise expand, depthwise, pointwise project).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    MBConv,
}

/// One layer of a chain network. `expansion` is 1 for `Conv` layers and the
/// bottleneck expansion ratio for `MBConv` layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub filters: u32,
    pub kernel: u32,
    pub stride: u32,
    pub expansion: u32,
}

impl LayerSpec {
    pub fn conv(filters: u32, kernel: u32, stride: u32) -> Self {
        Self {
            kind: LayerKind::Conv,
            filters,
            kernel,
            stride,
            expansion: 1,
        }
    }

    pub fn mbconv(filters: u32, kernel: u32, stride: u32, expansion: u32) -> Self {
        Self {
            kind: LayerKind::MBConv,
            filters,
            kernel,
            stride,
            expansion,
        }
    }

    fn check(&self, index: usize) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::InvalidNetwork(format!("layer {index}: {msg}")));
        if self.filters == 0 {
            return fail("filters must be positive".into());
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return fail(format!("kernel {} must be odd and positive", self.kernel));
        }
        if self.stride != 1 && self.stride != 2 {
            return fail(format!("stride {} must be 1 or 2", self.stride));
        }
        match self.kind {
            LayerKind::Conv if self.expansion != 1 => {
                fail(format!("conv expansion {} must be 1", self.expansion))
            }
            LayerKind::MBConv if self.expansion != 3 && self.expansion != 6 => {
                fail(format!("mbconv expansion {} must be 3 or 6", self.expansion))
            }
            _ => Ok(()),
        }
    }

    /// Output shape under same padding with ceil division by the stride.
    pub fn output_shape(&self, input: TensorShape) -> TensorShape {
        TensorShape {
            height: input.height.div_ceil(self.stride),
            width: input.width.div_ceil(self.stride),
            channels: self.filters,
        }
    }

    /// Multiply-accumulate count for this layer given its input and output
    /// shapes. MBConv sums its expand, depthwise, and project stages; the
    /// expansion runs at input resolution, the rest at output resolution.
    pub fn mac_count(&self, input: TensorShape, output: TensorShape) -> u64 {
        let c_in = input.channels as u64;
        let k2 = (self.kernel as u64) * (self.kernel as u64);
        let in_px = input.height as u64 * input.width as u64;
        let out_px = output.height as u64 * output.width as u64;
        let f = self.filters as u64;
        match self.kind {
            LayerKind::Conv => out_px * f * k2 * c_in,
            LayerKind::MBConv => {
                let hidden = self.expansion as u64 * c_in;
                let expand = in_px * c_in * hidden;
                let depthwise = out_px * hidden * k2;
                let project = out_px * hidden * f;
                expand + depthwise + project
            }
        }
    }

    /// Weight and bias count for this layer given its input channel count.
    pub fn param_count(&self, c_in: u32) -> u64 {
        let c_in = c_in as u64;
        let k2 = (self.kernel as u64) * (self.kernel as u64);
        let f = self.filters as u64;
        match self.kind {
            LayerKind::Conv => k2 * c_in * f + f,
            LayerKind::MBConv => {
                let hidden = self.expansion as u64 * c_in;
                let expand = c_in * hidden + hidden;
                let depthwise = hidden * k2 + hidden;
                let project = hidden * f + f;
                expand + depthwise + project
            }
        }
    }
}

/// A sampled chain network: an input tensor plus an ordered layer list.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChildNetwork {
    pub input: TensorShape,
    pub layers: Vec<LayerSpec>,
    #[serde(default = "default_precision")]
    pub precision_bits: u32,
}

fn default_precision() -> u32 {
    16
}

impl ChildNetwork {
    pub fn new(input: TensorShape, layers: Vec<LayerSpec>) -> Self {
        Self {
            input,
            layers,
            precision_bits: default_precision(),
        }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Structural validation; checks choice-set membership too when the
    /// active search space is supplied.
    pub fn validate(&self, space: Option<&SearchSpace>) -> Result<(), ModelError> {
        if self.layers.is_empty() {
            return Err(ModelError::InvalidNetwork("network has no layers".into()));
        }
        if self.input.height == 0 || self.input.width == 0 || self.input.channels == 0 {
            return Err(ModelError::InvalidNetwork(format!(
                "input shape {}x{}x{} has a zero dimension",
                self.input.height, self.input.width, self.input.channels
            )));
        }
        if self.precision_bits == 0 {
            return Err(ModelError::InvalidNetwork("precision_bits must be positive".into()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            layer.check(i)?;
            if let Some(space) = space {
                space.check_member(i, layer)?;
            }
        }
        if let Some(space) = space {
            let d = self.depth();
            if d < space.depth.min || d > space.depth.max {
                return Err(ModelError::InvalidNetwork(format!(
                    "depth {d} outside configured range {}..={}",
                    space.depth.min, space.depth.max
                )));
            }
        }
        Ok(())
    }

    /// Per-layer output shapes under same padding with ceil division.
    pub fn derive_shapes(&self) -> Result<Vec<TensorShape>, ModelError> {
        let mut cur = self.input;
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            if cur.height == 0 || cur.width == 0 || cur.channels == 0 {
                return Err(ModelError::ShapeUnderflow {
                    layer: i,
                    height: cur.height,
                    width: cur.width,
                    channels: cur.channels,
                });
            }
            cur = layer.output_shape(cur);
            out.push(cur);
        }
        Ok(out)
    }

    /// Total multiply-accumulate count over all layers.
    pub fn count_macs(&self) -> Result<u64, ModelError> {
        let shapes = self.derive_shapes()?;
        let mut input = self.input;
        let mut total = 0u64;
        for (layer, &output) in self.layers.iter().zip(&shapes) {
            total += layer.mac_count(input, output);
            input = output;
        }
        Ok(total)
    }

    /// Total parameter count (weights plus biases) over all layers.
    pub fn count_params(&self) -> u64 {
        let mut c_in = self.input.channels;
        let mut total = 0u64;
        for layer in &self.layers {
            total += layer.param_count(c_in);
            c_in = layer.filters;
        }
        total
    }

    /// Stable text key identifying the architecture:
    /// `kind|HxWxC|f,k,s,e;f,k,s,e;...`.
    pub fn canonical_key(&self) -> String {
        let kind = if self.layers.iter().all(|l| l.kind == LayerKind::Conv) {
            "ConvChain"
        } else if self.layers.iter().all(|l| l.kind == LayerKind::MBConv) {
            "MBConvChain"
        } else {
            "MixedChain"
        };
        let mut key = format!(
            "{kind}|{}x{}x{}|",
            self.input.height, self.input.width, self.input.channels
        );
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                key.push(';');
            }
            key.push_str(&format!("{},{},{},{}", l.filters, l.kernel, l.stride, l.expansion));
        }
        key
    }
}

/// Attribute sheet of one FPGA device model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FpgaSpec {
    pub name: String,
    pub logic_cells: u64,
    pub onchip_memory_bits: u64,
    pub dsp_slices: u64,
    pub clock_hz: f64,
    pub link_bytes_per_sec: f64,
    #[serde(default = "default_macs_per_dsp")]
    pub macs_per_dsp_per_cycle: u64,
}

fn default_macs_per_dsp() -> u64 {
    1
}

impl FpgaSpec {
    /// Peak multiply-accumulate throughput in MACs per second.
    pub fn peak_macs_per_sec(&self) -> f64 {
        self.dsp_slices as f64 * self.clock_hz * self.macs_per_dsp_per_cycle as f64
    }
}

/// One pool entry: a device model and how many interchangeable physical
/// units of it are available.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    #[serde(flatten)]
    pub spec: FpgaSpec,
    pub count: u32,
}

/// The set of FPGAs available to one pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpgaPool {
    pub devices: Vec<PoolEntry>,
}

impl FpgaPool {
    pub fn new(devices: Vec<PoolEntry>) -> Self {
        Self { devices }
    }

    /// Pool with `count` identical units of one device model.
    pub fn homogeneous(spec: FpgaSpec, count: u32) -> Self {
        Self {
            devices: vec![PoolEntry { spec, count }],
        }
    }

    /// Total number of physical units across all entries.
    pub fn total_units(&self) -> u32 {
        self.devices.iter().map(|e| e.count).sum()
    }

    pub fn find(&self, name: &str) -> Option<&PoolEntry> {
        self.devices.iter().find(|e| e.spec.name == name)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.devices.is_empty() || self.total_units() == 0 {
            return Err(ModelError::InvalidSpace("device pool is empty".into()));
        }
        for e in &self.devices {
            if e.spec.name.is_empty() {
                return Err(ModelError::InvalidSpace("device name is empty".into()));
            }
            if e.spec.clock_hz <= 0.0
                || e.spec.link_bytes_per_sec <= 0.0
                || e.spec.dsp_slices == 0
                || e.spec.macs_per_dsp_per_cycle == 0
            {
                return Err(ModelError::InvalidSpace(format!(
                    "device {} has a non-positive rate attribute",
                    e.spec.name
                )));
            }
        }
        let mut names: Vec<&str> = self.devices.iter().map(|e| e.spec.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.devices.len() {
            return Err(ModelError::InvalidSpace("duplicate device name in pool".into()));
        }
        Ok(())
    }
}

/// Which chain family a search space generates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpaceKind {
    ConvChain,
    MBConvChain,
}

impl fmt::Display for SpaceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpaceKind::ConvChain => f.write_str("ConvChain"),
            SpaceKind::MBConvChain => f.write_str("MBConvChain"),
        }
    }
}

/// Whether strides are fixed at 1 or predicted per layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrideMode {
    Fixed1,
    Predicted,
}

/// Inclusive depth range of a space; `min == max` pins the depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthRange {
    pub min: usize,
    pub max: usize,
}

impl DepthRange {
    pub fn fixed(depth: usize) -> Self {
        Self {
            min: depth,
            max: depth,
        }
    }
}

/// The kinds of per-layer decisions a controller can emit, in the order
/// they are predicted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionKind {
    Filter,
    Kernel,
    Stride,
    Expansion,
}

/// Declarative definition of an architecture search space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    pub kind: SpaceKind,
    pub input: TensorShape,
    pub depth: DepthRange,
    pub filter_choices: Vec<u32>,
    pub kernel_choices: Vec<u32>,
    #[serde(default = "default_stride_choices")]
    pub stride_choices: Vec<u32>,
    #[serde(default)]
    pub expansion_choices: Vec<u32>,
    pub stride_mode: StrideMode,
    #[serde(default = "default_precision")]
    pub precision_bits: u32,
}

fn default_stride_choices() -> Vec<u32> {
    vec![1]
}

impl SearchSpace {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::InvalidSpace(msg));
        if self.depth.min == 0 || self.depth.min > self.depth.max {
            return fail(format!(
                "depth range {}..={} is empty or starts at zero",
                self.depth.min, self.depth.max
            ));
        }
        if self.input.height == 0 || self.input.width == 0 || self.input.channels == 0 {
            return fail("input shape has a zero dimension".into());
        }
        if self.precision_bits == 0 {
            return fail("precision_bits must be positive".into());
        }
        for (name, set) in [("filter", &self.filter_choices), ("kernel", &self.kernel_choices)] {
            if set.is_empty() {
                return fail(format!("{name}_choices is empty"));
            }
        }
        let mut seen = Vec::new();
        for (name, set) in [
            ("filter", &self.filter_choices),
            ("kernel", &self.kernel_choices),
            ("stride", &self.stride_choices),
            ("expansion", &self.expansion_choices),
        ] {
            seen.clear();
            seen.extend_from_slice(set);
            seen.sort_unstable();
            seen.dedup();
            if seen.len() != set.len() {
                return fail(format!("{name}_choices has duplicates"));
            }
        }
        if self.filter_choices.contains(&0) {
            return fail("filter_choices must be positive".into());
        }
        if self.kernel_choices.iter().any(|&k| k == 0 || k % 2 == 0) {
            return fail("kernel_choices must be odd and positive".into());
        }
        if self.stride_choices.is_empty()
            || self.stride_choices.iter().any(|&s| s != 1 && s != 2)
        {
            return fail("stride_choices must be a nonempty subset of {1, 2}".into());
        }
        if self.stride_mode == StrideMode::Fixed1 && self.stride_choices != [1] {
            return fail("fixed-stride mode requires stride_choices = [1]".into());
        }
        match self.kind {
            SpaceKind::ConvChain => {
                if !self.expansion_choices.is_empty() && self.expansion_choices != [1] {
                    return fail("conv chains take no expansion choices".into());
                }
            }
            SpaceKind::MBConvChain => {
                if self.expansion_choices.is_empty()
                    || self.expansion_choices.iter().any(|&e| e != 3 && e != 6)
                {
                    return fail("expansion_choices must be a nonempty subset of {3, 6}".into());
                }
            }
        }
        Ok(())
    }

    /// Decision kinds a controller predicts per layer, in order.
    pub fn decision_kinds(&self) -> Vec<DecisionKind> {
        match self.kind {
            SpaceKind::ConvChain => {
                vec![DecisionKind::Filter, DecisionKind::Kernel, DecisionKind::Stride]
            }
            SpaceKind::MBConvChain => vec![
                DecisionKind::Filter,
                DecisionKind::Kernel,
                DecisionKind::Stride,
                DecisionKind::Expansion,
            ],
        }
    }

    /// Value set for one decision kind.
    pub fn choices(&self, kind: DecisionKind) -> &[u32] {
        match kind {
            DecisionKind::Filter => &self.filter_choices,
            DecisionKind::Kernel => &self.kernel_choices,
            DecisionKind::Stride => &self.stride_choices,
            DecisionKind::Expansion => &self.expansion_choices,
        }
    }

    /// Number of distinct single-layer configurations.
    pub fn per_layer_size(&self) -> u128 {
        self.decision_kinds()
            .iter()
            .map(|&k| self.choices(k).len() as u128)
            .product()
    }

    fn check_member(&self, index: usize, layer: &LayerSpec) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::InvalidNetwork(format!("layer {index}: {msg}")));
        let expect_kind = match self.kind {
            SpaceKind::ConvChain => LayerKind::Conv,
            SpaceKind::MBConvChain => LayerKind::MBConv,
        };
        if layer.kind != expect_kind {
            return fail("layer kind outside search space".into());
        }
        for (kind, value) in [
            (DecisionKind::Filter, layer.filters),
            (DecisionKind::Kernel, layer.kernel),
            (DecisionKind::Stride, layer.stride),
        ] {
            if !self.choices(kind).contains(&value) {
                return fail(format!("{kind:?} value {value} outside search space"));
            }
        }
        if self.kind == SpaceKind::MBConvChain
            && !self.expansion_choices.contains(&layer.expansion)
        {
            return fail(format!("Expansion value {} outside search space", layer.expansion));
        }
        Ok(())
    }

    /// Build a layer from one choice index per decision kind.
    pub fn layer_from_choices(&self, picks: &[usize]) -> LayerSpec {
        let kinds = self.decision_kinds();
        debug_assert_eq!(picks.len(), kinds.len());
        let mut filters = 0;
        let mut kernel = 0;
        let mut stride = 1;
        let mut expansion = 1;
        for (&kind, &pick) in kinds.iter().zip(picks) {
            let value = self.choices(kind)[pick];
            match kind {
                DecisionKind::Filter => filters = value,
                DecisionKind::Kernel => kernel = value,
                DecisionKind::Stride => stride = value,
                DecisionKind::Expansion => expansion = value,
            }
        }
        match self.kind {
            SpaceKind::ConvChain => LayerSpec::conv(filters, kernel, stride),
            SpaceKind::MBConvChain => LayerSpec::mbconv(filters, kernel, stride, expansion),
        }
    }

    /// Draw a network uniformly at random: depth uniform over the range,
    /// each decision uniform over its value set.
    pub fn sample_uniform<R: rand::Rng>(&self, rng: &mut R) -> ChildNetwork {
        let depth = rng.random_range(self.depth.min..=self.depth.max);
        let kinds = self.decision_kinds();
        let layers = (0..depth)
            .map(|_| {
                let picks: Vec<usize> = kinds
                    .iter()
                    .map(|&k| rng.random_range(0..self.choices(k).len()))
                    .collect();
                self.layer_from_choices(&picks)
            })
            .collect();
        let mut net = ChildNetwork::new(self.input, layers);
        net.precision_bits = self.precision_bits;
        net
    }

    /// Enumerate every network of depth `depth` in lexicographic order of
    /// per-layer choice indices.
    pub fn enumerate_depth(&self, depth: usize) -> SpaceIter<'_> {
        let kinds = self.decision_kinds();
        let widths: Vec<usize> = kinds.iter().map(|&k| self.choices(k).len()).collect();
        SpaceIter {
            space: self,
            widths,
            depth,
            cursor: vec![0; depth * self.decision_kinds().len()],
            done: false,
        }
    }
}

/// Iterator over every network of one depth in a search space.
pub struct SpaceIter<'a> {
    space: &'a SearchSpace,
    widths: Vec<usize>,
    depth: usize,
    cursor: Vec<usize>,
    done: bool,
}

impl Iterator for SpaceIter<'_> {
    type Item = ChildNetwork;

    fn next(&mut self) -> Option<ChildNetwork> {
        if self.done {
            return None;
        }
        let per_layer = self.widths.len();
        let layers = (0..self.depth)
            .map(|l| {
                self.space
                    .layer_from_choices(&self.cursor[l * per_layer..(l + 1) * per_layer])
            })
            .collect();
        let mut net = ChildNetwork::new(self.space.input, layers);
        net.precision_bits = self.space.precision_bits;

        // Odometer increment, last decision fastest.
        let mut i = self.cursor.len();
        loop {
            if i == 0 {
                self.done = true;
                break;
            }
            i -= 1;
            self.cursor[i] += 1;
            if self.cursor[i] < self.widths[i % per_layer] {
                break;
            }
            self.cursor[i] = 0;
        }
        if self.cursor.is_empty() {
            self.done = true;
        }
        Some(net)
    }
}
