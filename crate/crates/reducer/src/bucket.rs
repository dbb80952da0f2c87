use bks_autograd::Parameter;
use bks_collectives::Work;

/// One parameter's slice of a bucket's flat buffer, in elements.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BucketSlot {
    pub param_index: usize,
    pub offset: usize,
    pub len: usize,
}

/// Greedy reverse-registration-order packing: scan parameters from the last
/// registered to the first, start a new bucket whenever adding the next
/// parameter would exceed the byte cap (unless the bucket is empty, so an
/// oversized parameter occupies its own bucket). Buffers are skipped — they
/// never receive gradients. Deterministic: identical models on every rank
/// produce identical layouts.
pub fn bucket_layout(params: &[Parameter], cap_bytes: usize) -> Vec<Vec<BucketSlot>> {
    let mut buckets: Vec<Vec<BucketSlot>> = Vec::new();
    let mut current: Vec<BucketSlot> = Vec::new();
    let mut current_bytes = 0usize;
    let mut current_elems = 0usize;
    for param in params.iter().rev() {
        if param.is_buffer() {
            continue;
        }
        let elems = param.numel();
        let bytes = elems * 8;
        if !current.is_empty() && current_bytes + bytes > cap_bytes {
            buckets.push(std::mem::take(&mut current));
            current_bytes = 0;
            current_elems = 0;
        }
        current.push(BucketSlot {
            param_index: param.index(),
            offset: current_elems,
            len: elems,
        });
        current_bytes += bytes;
        current_elems += elems;
    }
    if !current.is_empty() {
        buckets.push(current);
    }
    buckets
}

/// Bucket runtime state: a reusable flat buffer (absent while an AllReduce is
/// in flight), a pending-gradient count replenished each synchronizing
/// iteration, and the handle of the op in flight.
pub(crate) struct Bucket {
    pub slots: Vec<BucketSlot>,
    pub buffer: Option<Vec<f64>>,
    pub pending: usize,
    pub ready: bool,
    pub launched: bool,
    pub work: Option<Work<Vec<f64>>>,
}

impl Bucket {
    pub fn new(slots: Vec<BucketSlot>) -> Bucket {
        let elems: usize = slots.iter().map(|s| s.len).sum();
        let pending = slots.len();
        Bucket {
            slots,
            buffer: Some(vec![0.0; elems]),
            pending,
            ready: false,
            launched: false,
            work: None,
        }
    }
}
