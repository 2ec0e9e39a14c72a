"""Tour of the tape-based autodiff core.

Builds a few scalar and matrix expressions, runs reverse-mode backward,
and spot-checks one gradient against a central finite difference.
"""

import numpy as np

import crossmim.tensor as T


def main():
    print("== scalars ==")
    x = T.Tensor(1.5, requires_grad=True)
    y = T.tanh(x) * 2.0 + x * x
    with T.fresh_tape():
        y = T.tanh(x) * 2.0 + x * x
        T.backward(y)
    # d/dx [2 tanh(x) + x^2] = 2 (1 - tanh^2 x) + 2x
    expect = 2.0 * (1.0 - np.tanh(1.5) ** 2) + 3.0
    print(f"y  = {y.item():.6f}")
    print(f"dy/dx analytic {float(x.grad):.6f}, closed form {expect:.6f}")
    x.zero_grad()

    print("\n== matrices and broadcasting ==")
    rng = np.random.default_rng(0)
    w = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = T.Tensor(np.zeros(4), requires_grad=True)
    data = T.constant(rng.normal(size=(8, 3)))
    with T.fresh_tape():
        pred = data @ w + T.reshape(b, (1, -1))
        loss = T.reduce_mean(pred * pred)
        T.backward(loss)
    print(f"loss {loss.item():.6f}")
    print(f"w.grad shape {w.grad.shape}, b.grad shape {b.grad.shape}")

    # finite-difference check on one weight entry
    h = 1e-6
    flat = w.data.reshape(-1)
    orig = flat[5]

    def f():
        with T.no_grad():
            p = data @ w + T.reshape(b, (1, -1))
            return float(T.reduce_mean(p * p).data)

    flat[5] = orig + h
    up = f()
    flat[5] = orig - h
    down = f()
    flat[5] = orig
    fd = (up - down) / (2 * h)
    print(f"w.grad[1,1]   analytic {w.grad.reshape(-1)[5]:.8f}")
    print(f"w.grad[1,1]   finite-difference {fd:.8f}")

    print("\n== gradients accumulate until cleared ==")
    z = T.Tensor(2.0, requires_grad=True)
    for k in range(3):
        with T.fresh_tape():
            T.backward(z * z)
        print(f"after backward #{k + 1}: z.grad = {float(z.grad)}")
    T.zero_grads([z])
    print(f"after zero_grads: z.grad = {z.grad}")


if __name__ == "__main__":
    main()
