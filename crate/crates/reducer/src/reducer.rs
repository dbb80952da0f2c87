use std::cell::RefCell;
use std::collections::BTreeSet;
use std::rc::{Rc, Weak};
use std::time::Instant;

use bks_autograd::{traverse_reachable_params, HookFn, Model, Parameter, Tensor};
use bks_collectives::ProcessGroup;

use crate::bucket::{bucket_layout, Bucket};
use crate::error::ReducerError;

/// Default AllReduce bucket cap: 25 MB.
pub const DEFAULT_BUCKET_CAP_BYTES: usize = 26_214_400;

pub struct ReducerConfig {
    pub process_group: ProcessGroup,
    /// Byte cap for greedy bucket packing; at least one fp64 element.
    pub bucket_cap_bytes: usize,
    /// Traverse the graph each forward pass and pre-mark unreachable
    /// parameters so a skipped sub-graph cannot hang the backward pass.
    pub find_unused_parameters: bool,
    /// Launch each bucket's AllReduce as soon as it is ready (mid-backward).
    /// Off, every launch is deferred until all buckets are ready — the
    /// no-overlap baseline the benchmark compares against.
    pub overlap_comm: bool,
}

impl ReducerConfig {
    pub fn new(process_group: ProcessGroup) -> ReducerConfig {
        ReducerConfig {
            process_group,
            bucket_cap_bytes: DEFAULT_BUCKET_CAP_BYTES,
            find_unused_parameters: false,
            overlap_comm: true,
        }
    }

    pub fn bucket_cap_bytes(mut self, cap: usize) -> ReducerConfig {
        self.bucket_cap_bytes = cap;
        self
    }

    pub fn find_unused_parameters(mut self, on: bool) -> ReducerConfig {
        self.find_unused_parameters = on;
        self
    }

    pub fn overlap_comm(mut self, on: bool) -> ReducerConfig {
        self.overlap_comm = on;
        self
    }
}

struct ReducerState {
    group: ProcessGroup,
    world: u32,
    find_unused: bool,
    overlap: bool,
    /// All model parameters in registration order, buffers included.
    params: Vec<Parameter>,
    /// param_index -> (bucket index, slot position); None for buffers.
    slot_of: Vec<Option<(usize, usize)>>,
    buckets: Vec<Bucket>,
    /// One byte per param_index; 1 = participated locally this accumulation
    /// period. Reset only after a synchronizing backward completes.
    bitmap: Vec<u8>,
    /// Toggled by the no_sync scope.
    sync_enabled: bool,
    /// Latched from sync_enabled at each forward; hooks consult this.
    iter_sync: bool,
    /// A synchronizing iteration is underway and finalize has not run.
    iteration_open: bool,
    next_to_launch: usize,
    ready_count: usize,
    fired: Vec<bool>,
    launch_trace: Vec<usize>,
    hooks_at_launch: Vec<usize>,
    exposed_comm_s: f64,
}

/// The distributed data parallel wrapper. Construction broadcasts rank 0's
/// parameters and buffers so every replica starts identically; afterwards the
/// wrapped model is driven through [`DataParallel::forward`] and plain
/// `backward` on the loss, and gradients come back averaged across ranks.
pub struct DataParallel<M: Model> {
    net: M,
    state: Rc<RefCell<ReducerState>>,
}

impl<M: Model> DataParallel<M> {
    pub fn new(net: M, cfg: ReducerConfig) -> Result<DataParallel<M>, ReducerError> {
        if cfg.bucket_cap_bytes < 8 {
            return Err(ReducerError::Usage(
                "bucket_cap_bytes must hold at least one fp64 element".into(),
            ));
        }
        let params = net.parameters();
        if params.is_empty() {
            return Err(ReducerError::Usage("model has no parameters".into()));
        }
        for (i, p) in params.iter().enumerate() {
            if p.index() != i {
                return Err(ReducerError::Usage(format!(
                    "parameter indices must be contiguous in registration order; \
                     position {i} holds index {}",
                    p.index()
                )));
            }
        }

        let group = cfg.process_group;
        broadcast_values(&group, &params, |_| true).map_err(|source| match source {
            ReducerError::Collective { source, .. } => ReducerError::Broadcast { source },
            other => other,
        })?;

        let layout = bucket_layout(&params, cfg.bucket_cap_bytes);
        let buckets: Vec<Bucket> = layout.into_iter().map(Bucket::new).collect();
        let mut slot_of: Vec<Option<(usize, usize)>> = vec![None; params.len()];
        for (b, bucket) in buckets.iter().enumerate() {
            for (s, slot) in bucket.slots.iter().enumerate() {
                slot_of[slot.param_index] = Some((b, s));
            }
        }

        let n = params.len();
        let world = group.world();
        let state = Rc::new(RefCell::new(ReducerState {
            group,
            world,
            find_unused: cfg.find_unused_parameters,
            overlap: cfg.overlap_comm,
            params: params.clone(),
            slot_of,
            buckets,
            bitmap: vec![0; n],
            sync_enabled: true,
            iter_sync: true,
            iteration_open: false,
            next_to_launch: 0,
            ready_count: 0,
            fired: vec![false; n],
            launch_trace: Vec::new(),
            hooks_at_launch: Vec::new(),
            exposed_comm_s: 0.0,
        }));

        let hook = make_hook(Rc::downgrade(&state));
        for p in &params {
            if !p.is_buffer() {
                p.register_post_accumulate_hook(Rc::clone(&hook))?;
            }
        }

        Ok(DataParallel { net, state })
    }

    /// Forward pass on the wrapped model. On synchronizing iterations this
    /// broadcasts buffers from rank 0, replenishes bucket pending counts, and
    /// (with find_unused_parameters) pre-marks every parameter the produced
    /// graph cannot reach so backward never waits on it.
    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor, ReducerError> {
        let iter_sync = {
            let mut s = self.state.borrow_mut();
            self::check_unchanged(&s.params, &self.net)?;
            s.iter_sync = s.sync_enabled;
            if s.iter_sync {
                if s.iteration_open {
                    return Err(ReducerError::PriorIterationUnfinished);
                }
                replenish(&mut s);
            }
            s.iter_sync
        };

        if iter_sync {
            let (group, params, has_buffers) = {
                let s = self.state.borrow();
                let has = s.params.iter().any(|p| p.is_buffer());
                (s.group.clone(), s.params.clone(), has)
            };
            if has_buffers {
                broadcast_values(&group, &params, |p| p.is_buffer())?;
            }
            self.state.borrow_mut().iteration_open = true;
        }

        let out = self.net.forward(input)?;
        let reached = traverse_reachable_params(std::slice::from_ref(&out));

        let mut s = self.state.borrow_mut();
        for &idx in &reached {
            s.bitmap[idx] = 1;
        }
        if s.iter_sync && s.find_unused {
            premark_unreachable(&mut s, &reached)?;
        }
        Ok(out)
    }

    /// Run `f` with gradient synchronization suppressed: hooks only record
    /// participation and gradients accumulate in `param.grad`. The first
    /// backward pass after the scope synchronizes the accumulated total.
    pub fn no_sync<R>(
        &mut self,
        f: impl FnOnce(&mut Self) -> Result<R, ReducerError>,
    ) -> Result<R, ReducerError> {
        {
            let mut s = self.state.borrow_mut();
            if !s.sync_enabled {
                return Err(ReducerError::NestedNoSync);
            }
            s.sync_enabled = false;
        }
        // Restore on every exit path, unwinds included.
        struct Restore(Rc<RefCell<ReducerState>>);
        impl Drop for Restore {
            fn drop(&mut self) {
                self.0.borrow_mut().sync_enabled = true;
            }
        }
        let _restore = Restore(Rc::clone(&self.state));
        f(self)
    }

    pub fn rank(&self) -> u32 {
        self.state.borrow().group.rank()
    }

    pub fn world(&self) -> u32 {
        self.state.borrow().world
    }

    pub fn bucket_count(&self) -> usize {
        self.state.borrow().buckets.len()
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        self.state.borrow().params.clone()
    }

    pub fn net(&self) -> &M {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut M {
        &mut self.net
    }

    /// Bucket indices in the order their AllReduce launched during the last
    /// synchronizing iteration.
    pub fn last_launch_trace(&self) -> Vec<usize> {
        self.state.borrow().launch_trace.clone()
    }

    /// For each launch in the trace, how many gradient hooks had fired by
    /// launch time — shows communication starting mid-backward.
    pub fn hooks_fired_at_launch(&self) -> Vec<usize> {
        self.state.borrow().hooks_at_launch.clone()
    }

    /// Seconds spent blocked on communication (finalize waits and the bitmap
    /// reduction) since the last call. This is the exposed — not overlapped —
    /// communication time.
    pub fn take_exposed_comm_seconds(&mut self) -> f64 {
        let mut s = self.state.borrow_mut();
        std::mem::take(&mut s.exposed_comm_s)
    }
}

fn check_unchanged<M: Model>(params: &[Parameter], net: &M) -> Result<(), ReducerError> {
    let now = net.parameters();
    if now.len() != params.len() || now.iter().zip(params).any(|(a, b)| !a.same_storage(b)) {
        return Err(ReducerError::ModelMutated);
    }
    Ok(())
}

/// Concatenate the selected parameters' values, broadcast from rank 0, and
/// scatter back. Used whole-model at construction and buffers-only before
/// synchronizing forwards.
fn broadcast_values(
    group: &ProcessGroup,
    params: &[Parameter],
    select: impl Fn(&Parameter) -> bool,
) -> Result<(), ReducerError> {
    let chosen: Vec<&Parameter> = params.iter().filter(|p| select(p)).collect();
    if chosen.is_empty() {
        return Ok(());
    }
    let mut flat = Vec::with_capacity(chosen.iter().map(|p| p.numel()).sum());
    for p in &chosen {
        flat.extend_from_slice(&p.value());
    }
    let result = group
        .broadcast(flat, 0)
        .and_then(|w| w.wait())
        .map_err(|source| ReducerError::Collective { bucket: 0, source })?;
    let mut offset = 0;
    for p in &chosen {
        let n = p.numel();
        p.set_value(result[offset..offset + n].to_vec())?;
        offset += n;
    }
    Ok(())
}

fn replenish(s: &mut ReducerState) {
    for bucket in &mut s.buckets {
        bucket.pending = bucket.slots.len();
        bucket.ready = false;
        bucket.launched = false;
        debug_assert!(bucket.work.is_none());
        debug_assert!(bucket.buffer.is_some());
    }
    s.next_to_launch = 0;
    s.ready_count = 0;
    s.fired.iter_mut().for_each(|f| *f = false);
    s.launch_trace.clear();
    s.hooks_at_launch.clear();
}

/// Copy the parameter's current (possibly accumulated) gradient into its
/// bucket slot scaled by 1/world, so the AllReduce sum lands on the average
/// directly. A parameter with no gradient contributes zeros.
fn fill_slot_and_decrement(s: &mut ReducerState, param_index: usize) {
    let (b, slot_pos) = s.slot_of[param_index]
        .unwrap_or_else(|| panic!("parameter {param_index} has no bucket slot"));
    let scale = 1.0 / s.world as f64;
    let grad = s.params[param_index].grad();
    let bucket = &mut s.buckets[b];
    let slot = &bucket.slots[slot_pos];
    let (offset, len) = (slot.offset, slot.len);
    let buffer = bucket
        .buffer
        .as_mut()
        .expect("bucket buffer present until launch");
    match grad {
        Some(g) => {
            for (dst, src) in buffer[offset..offset + len].iter_mut().zip(&g) {
                *dst = src * scale;
            }
        }
        None => buffer[offset..offset + len].fill(0.0),
    }
    assert!(bucket.pending > 0, "bucket {b} pending count underflow");
    bucket.pending -= 1;
    if bucket.pending == 0 {
        bucket.ready = true;
        s.ready_count += 1;
    }
}

/// Launch AllReduce on ready buckets strictly in bucket order: bucket i+1
/// never launches before bucket i, so every rank issues the same sequence
/// even when their gradient completion orders differ.
fn launch_ready_in_order(s: &mut ReducerState) -> Result<(), ReducerError> {
    while s.next_to_launch < s.buckets.len() && s.buckets[s.next_to_launch].ready {
        let i = s.next_to_launch;
        let buffer = s.buckets[i]
            .buffer
            .take()
            .expect("ready bucket holds its buffer");
        let work = s
            .group
            .allreduce_sum(buffer)
            .map_err(|source| ReducerError::Collective { bucket: i, source })?;
        s.buckets[i].work = Some(work);
        s.buckets[i].launched = true;
        s.launch_trace.push(i);
        s.hooks_at_launch
            .push(s.fired.iter().filter(|f| **f).count());
        s.next_to_launch += 1;
    }
    Ok(())
}

/// Wait on every bucket in order, OR-reduce the participation bitmap when
/// unused-parameter tracking is on, and copy averaged slots back into
/// `param.grad` — touching only parameters that participated on some rank.
fn finalize(s: &mut ReducerState) -> Result<(), ReducerError> {
    let mut exposed = 0.0;
    for i in 0..s.buckets.len() {
        let work = s.buckets[i]
            .work
            .take()
            .expect("finalize runs only after every bucket launched");
        let start = Instant::now();
        let result = work
            .wait()
            .map_err(|source| ReducerError::Collective { bucket: i, source })?;
        exposed += start.elapsed().as_secs_f64();
        s.buckets[i].buffer = Some(result);
    }

    let globally_used: Option<Vec<u8>> = if s.find_unused {
        let local = std::mem::take(&mut s.bitmap);
        let start = Instant::now();
        let global = s
            .group
            .allreduce_max_u8(local)
            .and_then(|w| w.wait())
            .map_err(|source| ReducerError::Bitmap { source })?;
        exposed += start.elapsed().as_secs_f64();
        Some(global)
    } else {
        None
    };

    for b in 0..s.buckets.len() {
        for slot_pos in 0..s.buckets[b].slots.len() {
            let (param_index, offset, len) = {
                let slot = &s.buckets[b].slots[slot_pos];
                (slot.param_index, slot.offset, slot.len)
            };
            if let Some(mask) = &globally_used {
                if mask[param_index] == 0 {
                    continue;
                }
            }
            let averaged = {
                let buffer = s.buckets[b].buffer.as_ref().unwrap();
                buffer[offset..offset + len].to_vec()
            };
            s.params[param_index].set_grad(Some(averaged))?;
        }
    }

    s.bitmap = vec![0; s.params.len()];
    s.iteration_open = false;
    s.exposed_comm_s += exposed;
    Ok(())
}

/// Pre-decrement the bucket slot of every parameter the forward graph cannot
/// reach, so their buckets become ready without a hook. A locally unused
/// parameter still contributes its accumulated gradient if one exists (the
/// no_sync case); otherwise it contributes zeros.
fn premark_unreachable(
    s: &mut ReducerState,
    reached: &BTreeSet<usize>,
) -> Result<(), ReducerError> {
    let unreached: Vec<usize> = s
        .params
        .iter()
        .filter(|p| !p.is_buffer() && !reached.contains(&p.index()))
        .map(|p| p.index())
        .collect();
    for idx in unreached {
        fill_slot_and_decrement(s, idx);
    }
    // Degenerate forward touching no parameters: every bucket is ready now
    // and no hook will ever fire, so launch and finalize here.
    if s.ready_count == s.buckets.len() && s.next_to_launch < s.buckets.len() && reached.is_empty()
    {
        launch_ready_in_order(s)?;
        finalize(s)?;
    }
    Ok(())
}

fn make_hook(state: Weak<RefCell<ReducerState>>) -> HookFn {
    Rc::new(move |param_index| {
        let Some(state) = state.upgrade() else {
            return Err("reducer was dropped while its model was still training".into());
        };
        let mut s = state.borrow_mut();
        hook_impl(&mut s, param_index).map_err(Box::from)
    })
}

fn hook_impl(s: &mut ReducerState, param_index: usize) -> Result<(), ReducerError> {
    s.bitmap[param_index] = 1;
    if !s.iter_sync {
        // no_sync: participation recorded, communication skipped, gradients
        // keep accumulating in param.grad.
        return Ok(());
    }
    if s.fired[param_index] {
        return Err(ReducerError::Usage(format!(
            "gradient for parameter {param_index} was produced twice in one \
             synchronizing iteration (second backward without a forward?)"
        )));
    }
    s.fired[param_index] = true;
    fill_slot_and_decrement(s, param_index);
    if s.overlap {
        launch_ready_in_order(s)?;
    }
    if s.ready_count == s.buckets.len() {
        // No-overlap mode launches everything here, after the last gradient.
        launch_ready_in_order(s)?;
        finalize(s)?;
    }
    Ok(())
}
