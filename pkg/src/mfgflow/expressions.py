"""Custom coefficient models written as arithmetic expressions.

A custom model is a mapping (usually a YAML document) with

``features`` / ``features_dy``
    lists of expressions in ``y``: the moment features and their slopes;
``drift``, ``drift_x``, ... ``terminal_xm``
    one expression per kernel of :class:`~mfgflow.model.ModelKernels`.
    Kernels differentiated in the measure (``*_m``, ``*_xm``, ``*_am``)
    take a list with one expression per feature;
``constants``
    the declared structural constants, keyed by the
    :class:`~mfgflow.model.DeclaredConstants` field names;
``parameters`` (optional)
    named numbers usable inside expressions.

Expressions may use ``x``, ``a`` (or ``alpha``), the moments ``m1 .. mK``,
numbers, the parameters, ``+ - * / **``, ``exp`` and the built-in ``phi``
with its slope ``phi_slope``.  Every derivative is supplied by the author;
nothing is differentiated symbolically.
"""

import ast

import numpy as np
import yaml

from .errors import ConfigError
from .model import CoefficientModel, DeclaredConstants, ModelKernels, phi_slope, phi_value

_FUNCTIONS = {"exp": "np.exp", "phi": "phi_value", "phi_slope": "phi_slope"}
_BINOPS = (ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow)
_MEASURE_KERNELS = {"drift_m", "drift_xm", "drift_am", "running_m", "running_xm", "running_am",
                    "terminal_m", "terminal_xm"}


class _Translator(ast.NodeTransformer):
    def __init__(self, key, variables, parameters, n_features):
        self.key = key
        self.variables = variables
        self.parameters = parameters
        self.n_features = n_features

    def generic_visit(self, node):
        raise ConfigError(self.key, f"unsupported syntax {type(node).__name__}")

    def visit_Expression(self, node):
        node.body = self.visit(node.body)
        return node

    def visit_BinOp(self, node):
        if not isinstance(node.op, _BINOPS):
            raise ConfigError(self.key, f"operator {type(node.op).__name__} is not allowed")
        node.left, node.right = self.visit(node.left), self.visit(node.right)
        return node

    def visit_UnaryOp(self, node):
        if not isinstance(node.op, (ast.USub, ast.UAdd)):
            raise ConfigError(self.key, f"operator {type(node.op).__name__} is not allowed")
        node.operand = self.visit(node.operand)
        return node

    def visit_Constant(self, node):
        if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
            raise ConfigError(self.key, f"constant {node.value!r} is not a number")
        return ast.Constant(float(node.value))

    def visit_Name(self, node):
        name = node.id
        if name in self.parameters:
            return ast.Constant(float(self.parameters[name]))
        if name == "alpha" and "a" in self.variables:
            return ast.Name("a", ast.Load())
        if name in self.variables:
            return node
        if name.startswith("m") and name[1:].isdigit():
            k = int(name[1:])
            if 1 <= k <= self.n_features:
                return ast.Subscript(ast.Name("M", ast.Load()), ast.Constant(k - 1), ast.Load())
        raise ConfigError(self.key, f"unknown name '{name}'")

    def visit_Call(self, node):
        if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCTIONS or node.keywords:
            raise ConfigError(self.key, "only exp(.), phi(.) and phi_slope(.) may be called")
        if len(node.args) != 1:
            raise ConfigError(self.key, f"{node.func.id} takes one argument")
        target = ast.parse(_FUNCTIONS[node.func.id], mode="eval").body
        return ast.Call(target, [self.visit(node.args[0])], [])


def translate(source, key, variables, parameters=None, n_features=0):
    """Validated Python source for one expression, with moments as ``M[k]``."""
    try:
        tree = ast.parse(str(source).strip(), mode="eval")
    except SyntaxError as err:
        raise ConfigError(key, f"cannot parse '{source}': {err.msg}") from None
    tree = _Translator(key, set(variables), parameters or {}, n_features).visit(tree)
    # the zero multiple keeps every kernel array-valued in the vectorised path
    anchor = " + 0.0 * ".join(sorted(set(variables)))
    return f"({ast.unparse(tree)}) + 0.0 * {anchor}"


def _kernel_source(name, body):
    if name.startswith("features"):
        args = "y, p"
    elif name.startswith("terminal"):
        args = "x, M, p"
    else:
        args = "x, M, a, p"
    return f"def {name}({args}):\n    return {body}\n"


def build_kernels(spec, parameters, n_features):
    namespace = {"np": np, "phi_value": phi_value, "phi_slope": phi_slope}
    funcs = {}
    for name in ModelKernels._fields:
        if name not in spec:
            raise ConfigError(f"model.{name}", "missing expression")
        raw = spec[name]
        if name.startswith("features"):
            variables = ("y",)
        elif name.startswith("terminal"):
            variables = ("x",)
        else:
            variables = ("x", "a")
        listed = name.startswith("features") or name in _MEASURE_KERNELS
        if listed:
            if not isinstance(raw, (list, tuple)) or len(raw) != n_features:
                raise ConfigError(f"model.{name}", f"needs a list of {n_features} expressions")
            parts = [translate(e, f"model.{name}[{i}]", variables, parameters, n_features) for i, e in enumerate(raw)]
            body = "(" + ", ".join(parts) + ",)"
        else:
            if isinstance(raw, (list, tuple)):
                raise ConfigError(f"model.{name}", "expects a single expression")
            body = translate(raw, f"model.{name}", variables, parameters, n_features)
        exec(compile(_kernel_source(name, body), f"<model.{name}>", "exec"), namespace)
        funcs[name] = namespace[name]
    return ModelKernels(**funcs)


def model_from_mapping(spec):
    """CoefficientModel from a parsed custom-model mapping."""
    if not isinstance(spec, dict):
        raise ConfigError("model", "custom model must be a mapping")
    for key in ("d_x", "d_alpha"):
        if int(spec.get(key, 1)) != 1:
            raise ConfigError(f"model.{key}", "only scalar state and control are supported")
    features = spec.get("features")
    if not isinstance(features, (list, tuple)) or not features:
        raise ConfigError("model.features", "needs a non-empty list of expressions in y")
    parameters = spec.get("parameters") or {}
    for key, value in parameters.items():
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"model.parameters.{key}", "must be a number")
    kernels = build_kernels(spec, parameters, len(features))
    declared = spec.get("constants")
    if not isinstance(declared, dict):
        raise ConfigError("model.constants", "missing declared constants")
    try:
        constants = DeclaredConstants(**{k: float(v) for k, v in declared.items()})
    except TypeError as err:
        raise ConfigError("model.constants", str(err)) from None
    except ValueError as err:
        raise ConfigError("model.constants", str(err)) from None
    name = str(spec.get("name", "custom"))
    return CoefficientModel(
        name=name,
        kernels=kernels,
        params=np.zeros(1),
        n_features=len(features),
        constants=constants,
        family=f"custom:{name}",
        exact_monotone=bool(spec.get("exact_monotone", False)),
        separable=bool(spec.get("separable", False)),
    )


def load_model(path):
    with open(path) as fh:
        spec = yaml.safe_load(fh)
    return model_from_mapping(spec)
