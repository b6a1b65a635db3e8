# Tests package



