"""Conversions between model families.

to_nonlinear: a linear-state model becomes a ReLU-state model by splitting
every state into positive and negative parts (widths double, outputs equal).

to_gru / to_lstm: each gated nonlinear layer becomes a stack of gate-cell
layers: one recurrence layer, one layer per MLP depth running the read-out
and gate MLPs side by side, and a multiplicative tail.  The LSTM tail is a
single layer (forget gate zero, input gate and candidate carry the factors).
A strict GRU cannot zero out its history term while gating, so its tail is
two layers: an accumulator P_t = g*v + (1-g)*P_{t-1} followed by a
reconstruction layer that recovers g*v = P_t - (1-g)*P_{t-1} through the
reset-gate tap on delayed copies of P.  MLPs that do not end in a ReLU (and
gates that are constant one) go through a signed four-block product,
recombined by the stack read-out or folded into the next layer's input map.
"""

from __future__ import annotations

from fractions import Fraction

from .linalg import Matrix, Vector, ones_vec, vec_add, vec_neg, vec_relu, zeros_vec
from .models import (
    GATED_LINEAR_RNN,
    GATED_RNN,
    GRU_STACK,
    LINEAR_RNN,
    LSTM_STACK,
    RNN,
    GRULayer,
    LinOp,
    LSTMLayer,
    ModelError,
    RecurrentModel,
    StateLayer,
)


class ConversionError(ModelError):
    pass


# ---------------------------------------------------------------------------
# linear -> nonlinear state updates
# ---------------------------------------------------------------------------


def to_nonlinear(model: RecurrentModel) -> RecurrentModel:
    """Double every state into (positive, negative) halves so the ReLU in
    the state update acts as the identity; read-outs prepend [I, -I]."""
    if model.kind == LINEAR_RNN:
        new_kind = RNN
    elif model.kind == GATED_LINEAR_RNN:
        new_kind = GATED_RNN
    else:
        raise ConversionError("to_nonlinear expects a linear-state model, got %r" % model.kind)
    layers = []
    for layer in model.layers:
        A, B, b, s0 = layer.A, layer.B, layer.b, layer.s0
        nA = A.scale(Fraction(-1))
        A2 = Matrix.vstack([Matrix.hstack([A, nA]), Matrix.hstack([nA, A])])
        B2 = Matrix.vstack([B, B.scale(Fraction(-1))])
        b2 = tuple(b) + vec_neg(b)
        s02 = vec_relu(s0) + vec_relu(vec_neg(s0))
        m = len(s0)
        eye = Matrix.identity(m)
        recombine = LinOp(Matrix.hstack([eye, eye.scale(Fraction(-1))]), zeros_vec(m))
        layers.append(
            StateLayer(A2, B2, b2, s02, phi=(recombine,) + tuple(layer.phi), gamma=layer.gamma)
        )
    return model.with_layers(layers, kind=new_kind)


# ---------------------------------------------------------------------------
# MLP canonicalization
# ---------------------------------------------------------------------------


def canonicalize_mlp(mlp, in_dim: int):
    """Rewrite an op list as ReLU-activated layers plus a trailing affine.

    Returns (layers, P, c) with layers a list of (W, b) pairs, each followed
    by a ReLU, such that the original MLP equals u -> P @ u_k + c where u_k
    is the output of the layer stack (or the raw input when it is empty).
    """
    P = Matrix.identity(in_dim)
    c: Vector = zeros_vec(in_dim)
    layers: list[tuple[Matrix, Vector]] = []
    for op in mlp:
        if op == "relu":
            if P.is_identity() and all(v == 0 for v in c) and layers:
                continue  # ReLU after a ReLU layer is the identity
            layers.append((P, c))
            P = Matrix.identity(P.rows)
            c = zeros_vec(P.rows)
        else:
            c = vec_add(op.A.matvec(c), op.b)
            P = op.A @ P
    return layers, P, c


def _is_trivial(P: Matrix, c) -> bool:
    return P.is_identity() and all(v == 0 for v in c)


# ---------------------------------------------------------------------------
# shared group planning
# ---------------------------------------------------------------------------


class _GroupPlan:
    """Everything a gate-cell group needs, independent of GRU vs LSTM."""

    def __init__(self, layer: StateLayer, carrier_sel: Matrix, fold_R: Matrix, k_carry):
        self.layer = layer
        self.carrier_sel = carrier_sel  # previous hidden -> carry block source
        self.fold_R = fold_R  # carry -> true layer input (linear part)
        self.k_carry = tuple(k_carry)  # subtracted when the carry is written
        rec_b = fold_R.matvec(self.k_carry)  # x = fold_R @ carry + rec_b
        m = len(layer.s0)
        d_x = fold_R.rows
        phiL, Pphi, cphi = canonicalize_mlp(layer.phi, m)
        if layer.gamma is None:
            w = Pphi.rows
            gamL: list = []
            Pgam, cgam = Matrix.zeros(w, d_x), ones_vec(w)
        else:
            gamL, Pgam, cgam = canonicalize_mlp(layer.gamma, d_x)
        # recover the true layer input from the carry block
        if gamL:
            W1, b1 = gamL[0]
            gamL = [(W1 @ fold_R, vec_add(W1.matvec(rec_b), b1))] + gamL[1:]
        else:
            Pgam, cgam = Pgam @ fold_R, vec_add(Pgam.matvec(rec_b), cgam)
        self.phiL, self.Pphi, self.cphi = phiL, Pphi, cphi
        self.gamL, self.Pgam, self.cgam = gamL, Pgam, cgam
        self.width = Pphi.rows
        if Pgam.rows != self.width:
            raise ConversionError(
                "gate width %d does not match read-out width %d" % (Pgam.rows, self.width)
            )
        self.plain = _is_trivial(Pphi, cphi) and _is_trivial(Pgam, cgam)
        self.depth = max(len(phiL), len(gamL))

    def paired_layers(self):
        """(W, b, out_widths) per depth step, identity-padding short sides.

        Pads are safe: a padded side's value is either a ReLU layer output or
        the raw state / carry block, all of which are non-negative here.
        """
        m = len(self.layer.s0)
        cw = self.carrier_sel.rows
        wphi, wgam = m, cw
        out = []
        for i in range(self.depth):
            Wp, bp = self.phiL[i] if i < len(self.phiL) else (Matrix.identity(wphi), zeros_vec(wphi))
            Wg, bg = self.gamL[i] if i < len(self.gamL) else (Matrix.identity(wgam), zeros_vec(wgam))
            W = Matrix.block_diag([Wp, Wg])
            b = tuple(bp) + tuple(bg)
            wphi, wgam = Wp.rows, Wg.rows
            out.append((W, b, wphi, wgam))
        return out, wphi, wgam

    def split_layer(self, wphi: int, wgam: int):
        """Signed four-block layer: [p+;p-;p+;p- | g+;g+;g-;g-]."""
        w = self.width
        Pp, cp = self.Pphi, self.cphi
        Pg, cg = self.Pgam, self.cgam
        nPp, ncp = Pp.scale(Fraction(-1)), vec_neg(cp)
        nPg, ncg = Pg.scale(Fraction(-1)), vec_neg(cg)
        Wp = Matrix.vstack([Pp, nPp, Pp, nPp])
        Wg = Matrix.vstack([Pg, Pg, nPg, nPg])
        W = Matrix.block_diag([Wp, Wg])
        b = tuple(cp) + tuple(ncp) + tuple(cp) + tuple(ncp) + tuple(cg) + tuple(cg) + tuple(ncg) + tuple(ncg)
        assert Wp.cols == wphi and Wg.cols == wgam
        return W, b, 4 * w


_SPLIT_RECOMBINE_SIGNS = (1, -1, -1, 1)


def _split_recombine(w: int) -> Matrix:
    eye = Matrix.identity(w)
    return Matrix.hstack([eye.scale(Fraction(s)) for s in _SPLIT_RECOMBINE_SIGNS])


def _sel(rows: range, cols: int) -> Matrix:
    return Matrix.selection(list(rows), cols)


# ---------------------------------------------------------------------------
# GRU emission
# ---------------------------------------------------------------------------


def _gru_const_gates(width: int, in_width: int):
    """z = 1 and r = 1: the layer reduces to h = relu(W_h a + U_h h_prev + b_h)."""
    zeros_m = Matrix.zeros(width, in_width)
    zeros_u = Matrix.zeros(width, width)
    return dict(
        W_z=zeros_m, U_z=zeros_u, b_z=ones_vec(width),
        W_r=zeros_m, U_r=zeros_u, b_r=ones_vec(width),
    )


def _gru_recurrence(plan: _GroupPlan, in_width: int) -> GRULayer:
    layer = plan.layer
    m = len(layer.s0)
    cw = plan.carrier_sel.rows
    width = m + cw
    W_h = Matrix.vstack([layer.B @ plan.fold_R @ plan.carrier_sel, plan.carrier_sel])
    b_h = tuple(layer.b) + vec_neg(plan.k_carry)
    U_h = Matrix.block_diag([layer.A, Matrix.zeros(cw, cw)])
    return GRULayer(
        W_h=W_h, U_h=U_h, b_h=b_h, h0=tuple(layer.s0) + zeros_vec(cw),
        role="recurrence", **_gru_const_gates(width, in_width),
    )


def _gru_mlp(W: Matrix, b, role: str) -> GRULayer:
    width = W.rows
    return GRULayer(
        W_h=W, U_h=Matrix.zeros(width, width), b_h=tuple(b), h0=zeros_vec(width),
        role=role, **_gru_const_gates(width, W.cols),
    )


def _gru_product(pw: int) -> list[GRULayer]:
    """Two layers computing g*v from a = [v; g] with v, g >= 0.

    P1 passes v and g through and accumulates P = g*v + (1-g)*P_prev via the
    update gate.  P2 keeps signed copies of P one step back (reset-gate taps)
    and reconstructs g*v = P_t - (1-g_t)*P_{t-1} inside its candidate.
    """
    sel_v = _sel(range(0, pw), 2 * pw)
    sel_g = _sel(range(pw, 2 * pw), 2 * pw)
    # P1: [v-pass; g-pass; P]
    w1 = 3 * pw
    W_z1 = Matrix.vstack([Matrix.zeros(2 * pw, 2 * pw), sel_g])
    b_z1 = ones_vec(2 * pw) + zeros_vec(pw)
    W_h1 = Matrix.vstack([sel_v, sel_g, sel_v])
    p1 = GRULayer(
        W_z=W_z1, U_z=Matrix.zeros(w1, w1), b_z=b_z1,
        W_r=Matrix.zeros(w1, 2 * pw), U_r=Matrix.zeros(w1, w1), b_r=ones_vec(w1),
        W_h=W_h1, U_h=Matrix.zeros(w1, w1), b_h=zeros_vec(w1),
        h0=zeros_vec(w1), role="product-accumulate",
    )
    # P2: [P+a; P+b; P-a; P-b; OUT]
    w2 = 5 * pw
    selg1 = _sel(range(pw, 2 * pw), 3 * pw)
    selP = _sel(range(2 * pw, 3 * pw), 3 * pw)
    nselP = selP.scale(Fraction(-1))
    W_r2 = Matrix.vstack([selg1, Matrix.zeros(pw, 3 * pw), selg1, Matrix.zeros(2 * pw, 3 * pw)])
    b_r2 = zeros_vec(pw) + ones_vec(pw) + zeros_vec(pw) + ones_vec(pw) + zeros_vec(pw)
    W_h2 = Matrix.vstack([selP, selP, nselP, nselP, selP])
    eye = Matrix.identity(pw)
    U_h2 = Matrix.vstack(
        [
            Matrix.zeros(4 * pw, w2),
            Matrix.hstack([eye, eye.scale(Fraction(-1)), eye.scale(Fraction(-1)), eye,
                           Matrix.zeros(pw, pw)]),
        ]
    )
    p2 = GRULayer(
        W_z=Matrix.zeros(w2, 3 * pw), U_z=Matrix.zeros(w2, w2), b_z=ones_vec(w2),
        W_r=W_r2, U_r=Matrix.zeros(w2, w2), b_r=b_r2,
        W_h=W_h2, U_h=U_h2, b_h=zeros_vec(w2),
        h0=zeros_vec(w2), role="product-read",
    )
    return [p1, p2]


# ---------------------------------------------------------------------------
# LSTM emission
# ---------------------------------------------------------------------------


def _lstm_inert(width: int, in_width: int):
    """f = 0, i = 1, candidate = 1: the layer reduces to h = o."""
    zeros_m = Matrix.zeros(width, in_width)
    zeros_u = Matrix.zeros(width, width)
    return dict(
        W_f=zeros_m, U_f=zeros_u, b_f=zeros_vec(width),
        W_i=zeros_m, U_i=zeros_u, b_i=ones_vec(width),
        W_c=zeros_m, U_c=zeros_u, b_c=ones_vec(width),
    )


def _lstm_recurrence(plan: _GroupPlan, in_width: int) -> LSTMLayer:
    layer = plan.layer
    m = len(layer.s0)
    cw = plan.carrier_sel.rows
    width = m + cw
    W_o = Matrix.vstack([layer.B @ plan.fold_R @ plan.carrier_sel, plan.carrier_sel])
    b_o = tuple(layer.b) + vec_neg(plan.k_carry)
    U_o = Matrix.block_diag([layer.A, Matrix.zeros(cw, cw)])
    return LSTMLayer(
        W_o=W_o, U_o=U_o, b_o=b_o,
        h0=tuple(layer.s0) + zeros_vec(cw), c0=zeros_vec(width),
        role="recurrence", **_lstm_inert(width, in_width),
    )


def _lstm_mlp(W: Matrix, b, role: str) -> LSTMLayer:
    width = W.rows
    return LSTMLayer(
        W_o=W, U_o=Matrix.zeros(width, width), b_o=tuple(b),
        h0=zeros_vec(width), c0=zeros_vec(width),
        role=role, **_lstm_inert(width, W.cols),
    )


def _lstm_product(pw: int) -> list[LSTMLayer]:
    """One layer: f = 0, i = first factor, candidate = second, o = 1."""
    sel_v = _sel(range(0, pw), 2 * pw)
    sel_g = _sel(range(pw, 2 * pw), 2 * pw)
    zeros_u = Matrix.zeros(pw, pw)
    return [
        LSTMLayer(
            W_f=Matrix.zeros(pw, 2 * pw), U_f=zeros_u, b_f=zeros_vec(pw),
            W_i=sel_v, U_i=zeros_u, b_i=zeros_vec(pw),
            W_o=Matrix.zeros(pw, 2 * pw), U_o=zeros_u, b_o=ones_vec(pw),
            W_c=sel_g, U_c=zeros_u, b_c=zeros_vec(pw),
            h0=zeros_vec(pw), c0=zeros_vec(pw), role="product",
        )
    ]


# ---------------------------------------------------------------------------
# stack assembly
# ---------------------------------------------------------------------------


def _convert_to_stack(model: RecurrentModel, k_lb, flavor: str) -> RecurrentModel:
    if model.kind != GATED_RNN:
        raise ConversionError(
            "stack conversion expects a gated nonlinear model, got %r; "
            "use to_nonlinear on linear models first" % model.kind
        )
    if k_lb is None:
        k_lb = zeros_vec(model.input_dim)
    k_lb = tuple(k_lb)
    if len(k_lb) != model.input_dim:
        raise ConversionError("k_lb length %d != input dim %d" % (len(k_lb), model.input_dim))

    gru = flavor == "gru"
    emit_rec = _gru_recurrence if gru else _lstm_recurrence
    emit_mlp = _gru_mlp if gru else _lstm_mlp
    emit_prod = _gru_product if gru else _lstm_product

    layers: list = []
    groups_meta = []
    carrier_sel = Matrix.identity(model.input_dim)
    fold_R = Matrix.identity(model.input_dim)
    k_vec = k_lb
    prev_width = model.input_dim

    for li, src in enumerate(model.layers):
        if not isinstance(src, StateLayer):
            raise ConversionError("layer %d is not a state layer" % li)
        if src.B.cols != fold_R.rows:
            raise ConversionError("layer %d input dim mismatch during conversion" % li)
        plan = _GroupPlan(src, carrier_sel, fold_R, k_vec)
        group_start = len(layers)
        layers.append(emit_rec(plan, prev_width))
        prev_width = len(src.s0) + plan.carrier_sel.rows
        paired, wphi, wgam = plan.paired_layers()
        for W, b, _, _ in paired:
            layers.append(emit_mlp(W, tuple(b), "mlp"))
            prev_width = W.rows
        if plan.plain:
            if wphi != wgam:
                raise ConversionError("plain conversion with mismatched side widths")
            pw = plan.width
        else:
            W, b, out_w = plan.split_layer(wphi, wgam)
            layers.append(emit_mlp(W, b, "split"))
            prev_width = 2 * out_w
            pw = out_w
        layers.extend(emit_prod(pw))
        # where the product now lives, and how to map it to the layer output
        if gru:
            prev_width = 5 * pw
            prod_rows = range(4 * pw, 5 * pw)
        else:
            prev_width = pw
            prod_rows = range(0, pw)
        carrier_sel = _sel(prod_rows, prev_width)
        fold_R = Matrix.identity(pw) if plan.plain else _split_recombine(plan.width)
        k_vec = zeros_vec(carrier_sel.rows)
        groups_meta.append(
            {
                "source_layer": li,
                "mode": "plain" if plan.plain else "split",
                "layers": [group_start, len(layers)],
                "product_block": [prod_rows.start, prod_rows.stop],
            }
        )

    readout = fold_R @ carrier_sel
    if readout.rows != model.output_dim:
        raise ConversionError(
            "converted output width %d != source output dim %d"
            % (readout.rows, model.output_dim)
        )
    return RecurrentModel(
        kind=GRU_STACK if gru else LSTM_STACK,
        input_dim=model.input_dim,
        output_dim=model.output_dim,
        layers=tuple(layers),
        backend=model.backend,
        readout=readout,
        metadata=dict(model.metadata, activation="relu", groups=groups_meta),
    )


def to_gru(model: RecurrentModel, k_lb=None) -> RecurrentModel:
    """Gated nonlinear model -> stack of GRU cells with ReLU activations.

    k_lb must bound the model inputs from below, coordinate-wise (defaults
    to zero, which fits token ids and unit-interval encodings).
    """
    return _convert_to_stack(model, k_lb, "gru")


def to_lstm(model: RecurrentModel, k_lb=None) -> RecurrentModel:
    """Gated nonlinear model -> stack of LSTM cells with ReLU activations."""
    return _convert_to_stack(model, k_lb, "lstm")
