/* Busy-wait kernel used by the synthetic workloads.
 *
 * The loop is an iteration-counted dependent arithmetic chain: each step
 * feeds the previous result, so the compiler cannot collapse it, and the
 * result is returned to the caller as a sink.  The GIL is released for the
 * duration of the loop so concurrently spinning worker threads occupy
 * separate cores.
 */
#define PY_SSIZE_T_CLEAN
#include <Python.h>
#include <stdint.h>

static double
spin_loop(uint64_t iters)
{
    double acc = 1.0000000012;
    uint64_t i;
    for (i = 0; i < iters; i++) {
        acc = acc * 1.0000000019 + 1e-12;
        if (acc > 2.0)
            acc -= 1.0;
    }
    return acc;
}

static PyObject *
spin_iterations(PyObject *self, PyObject *args)
{
    unsigned long long iters;
    double result;

    if (!PyArg_ParseTuple(args, "K", &iters))
        return NULL;

    Py_BEGIN_ALLOW_THREADS
    result = spin_loop((uint64_t)iters);
    Py_END_ALLOW_THREADS

    return PyFloat_FromDouble(result);
}

static PyMethodDef spin_methods[] = {
    {"spin_iterations", spin_iterations, METH_VARARGS,
     "Run the busy-wait loop for the given iteration count; returns the sink "
     "value.  Releases the GIL while spinning."},
    {NULL, NULL, 0, NULL},
};

static struct PyModuleDef spin_module = {
    PyModuleDef_HEAD_INIT,
    "statefarm._spin",
    "GIL-releasing busy-wait kernel.",
    -1,
    spin_methods,
};

PyMODINIT_FUNC
PyInit__spin(void)
{
    return PyModule_Create(&spin_module);
}
