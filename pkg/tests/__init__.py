# Test suite for muscore
