use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use super::{Element, Tensor};

pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&[T], &[Tensor<T>]) -> Vec<Option<Vec<T>>> + Send + Sync>;

pub(crate) enum NodeKind<T: Element> {
    Leaf {
        grad: Mutex<Option<Vec<T>>>,
    },
    Op {
        name: &'static str,
        inputs: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    },
}

pub(crate) struct Node<T: Element> {
    kind: NodeKind<T>,
}

impl<T: Element> Node<T> {
    pub(crate) fn leaf() -> Self {
        Node {
            kind: NodeKind::Leaf {
                grad: Mutex::new(None),
            },
        }
    }

    pub(crate) fn op(name: &'static str, inputs: Vec<Tensor<T>>, backward: BackwardFn<T>) -> Self {
        Node {
            kind: NodeKind::Op {
                name,
                inputs,
                backward,
            },
        }
    }

    pub(crate) fn is_leaf(&self) -> bool {
        matches!(self.kind, NodeKind::Leaf { .. })
    }

    pub(crate) fn leaf_grad(&self) -> Option<Vec<T>> {
        match &self.kind {
            NodeKind::Leaf { grad } => grad.lock().expect("grad lock").clone(),
            NodeKind::Op { .. } => None,
        }
    }

    pub(crate) fn clear_grad(&self) {
        if let NodeKind::Leaf { grad } = &self.kind {
            *grad.lock().expect("grad lock") = None;
        }
    }

    fn key(self: &Arc<Self>) -> usize {
        Arc::as_ptr(self) as usize
    }
}

fn accumulate<T: Element>(slot: &mut Vec<T>, g: &[T]) {
    debug_assert_eq!(slot.len(), g.len());
    for (s, &v) in slot.iter_mut().zip(g) {
        *s = *s + v;
    }
}

/// Post-order DFS; the returned list has every node after all of its inputs.
fn topo_order<T: Element>(root: &Arc<Node<T>>) -> Vec<Arc<Node<T>>> {
    let mut order = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut stack: Vec<(Arc<Node<T>>, usize)> = vec![(Arc::clone(root), 0)];
    seen.insert(root.key());
    while let Some((node, next)) = stack.pop() {
        let inputs: &[Tensor<T>] = match &node.kind {
            NodeKind::Op { inputs, .. } => inputs,
            NodeKind::Leaf { .. } => &[],
        };
        if let Some(pos) = inputs[next..]
            .iter()
            .position(|t| t.node().is_some_and(|n| !seen.contains(&n.key())))
        {
            let child = Arc::clone(inputs[next + pos].node().expect("checked above"));
            seen.insert(child.key());
            stack.push((node, next + pos + 1));
            stack.push((child, 0));
        } else {
            order.push(node);
        }
    }
    order
}

pub(crate) fn run_backward<T: Element>(root: &Arc<Node<T>>, seed: Vec<T>) {
    let order = topo_order(root);
    let mut grads: HashMap<usize, Vec<T>> = HashMap::new();
    grads.insert(root.key(), seed);

    for node in order.iter().rev() {
        let Some(g) = grads.remove(&node.key()) else {
            continue;
        };
        match &node.kind {
            NodeKind::Leaf { grad } => {
                let mut cell = grad.lock().expect("grad lock");
                match cell.as_mut() {
                    Some(existing) => accumulate(existing, &g),
                    None => *cell = Some(g),
                }
            }
            NodeKind::Op {
                name,
                inputs,
                backward,
            } => {
                let input_grads = backward(&g, inputs);
                debug_assert_eq!(input_grads.len(), inputs.len(), "{name}: grad arity");
                for (input, ig) in inputs.iter().zip(input_grads) {
                    let (Some(child), Some(ig)) = (input.node(), ig) else {
                        continue;
                    };
                    debug_assert_eq!(ig.len(), input.numel(), "{name}: grad length");
                    match grads.get_mut(&child.key()) {
                        Some(existing) => accumulate(existing, &ig),
                        None => {
                            grads.insert(child.key(), ig);
                        }
                    }
                }
            }
        }
    }
}
