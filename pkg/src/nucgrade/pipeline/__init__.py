"""Dataset I/O, training, evaluation and the ``nucgrade`` command line."""
