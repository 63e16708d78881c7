function f(o) { return o.x; }
%PrepareFunctionForOptimization(f);
f({x: 1});
%OptimizeFunctionOnNextCall(f);
f({x: 2});
Object.defineProperty(Object.prototype, 'x', { get() { gc(); return 3; } });
%DeoptimizeFunction(f);
