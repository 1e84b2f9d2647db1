use ndarray::{ArrayD, IxDyn};

/// A trainable tensor with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f32>,
    pub grad: ArrayD<f32>,
}

impl Param {
    pub fn new(value: ArrayD<f32>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn filled(shape: &[usize], v: f32) -> Self {
        Self::new(ArrayD::from_elem(IxDyn(shape), v))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Whether a named tensor is optimized or only carried as state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotKind {
    Param,
    Buffer,
}

/// Mutable access to one named tensor of a module.
pub enum SlotMut<'a> {
    Param(&'a mut Param),
    Buffer(&'a mut ArrayD<f32>),
}

impl SlotMut<'_> {
    pub fn value_mut(&mut self) -> &mut ArrayD<f32> {
        match self {
            SlotMut::Param(p) => &mut p.value,
            SlotMut::Buffer(b) => b,
        }
    }

    pub fn kind(&self) -> SlotKind {
        match self {
            SlotMut::Param(_) => SlotKind::Param,
            SlotMut::Buffer(_) => SlotKind::Buffer,
        }
    }
}

/// Visits named tensors under a canonical, stable naming scheme.
pub trait Parameterized {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, SlotKind, &ArrayD<f32>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_>));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, slot| {
            if let SlotMut::Param(p) = slot {
                p.zero_grad();
            }
        });
    }

    fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit("", &mut |n, _, _| names.push(n.to_string()));
        names
    }
}

/// Joins a dotted prefix and a leaf name.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
